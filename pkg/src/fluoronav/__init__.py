"""Fluoroscopy/CT registration and navigation engine."""
