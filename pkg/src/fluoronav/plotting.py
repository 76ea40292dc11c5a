"""Report figures. Rendering is headless (Agg) and always goes to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalmetrics import SUCCESS_MM  # noqa: E402

MODE_STYLE = {"naive": ("tab:red", "s"), "poseonly": ("tab:orange", "^"), "full": ("tab:blue", "o")}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(outcomes: Sequence, axis: str, path, title: str = ""):
    """mPD against the swept scene parameter, one line per mode, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({o.result.mode for o in outcomes}, key=lambda m: list(MODE_STYLE).index(m))
    for m in modes:
        pts = sorted((float(o.params.get(axis, 0.0)), o.result.mpd) for o in outcomes if o.result.mode == m)
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        color, marker = MODE_STYLE.get(m, ("k", "x"))
        ax.plot(x, y, marker=marker, color=color, label=m)
        failed = ~np.isfinite(y)
        if failed.any():
            ax.plot(x[failed], np.full(failed.sum(), 100.0), "x", color=color)
    ax.axhline(SUCCESS_MM, color="grey", ls="--", lw=1, label=f"{SUCCESS_MM:g} mm")
    ax.set_yscale("log")
    ax.set_xlabel(f"{axis} ({'deg' if axis in ('angular', 'orbital') else 'mm'})")
    ax.set_ylabel("mPD (mm)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_roadmap_errors(errors: Sequence, path, predicted_mm: float = None):
    """Per-frame tip error and angle error of a roadmap replay."""
    e = np.array([x.euclid_mm for x in errors])
    a = np.array([x.angle_deg for x in errors])
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax0.plot(e, lw=0.8)
    if predicted_mm is not None:
        ax0.axhline(predicted_mm, color="tab:red", ls="--", lw=1, label="predicted mean")
        ax0.legend(fontsize=8)
    ax0.set_ylabel("tip error (mm)")
    ax1.plot(a, lw=0.8, color="tab:green")
    ax1.set_ylabel("angle error (deg)")
    ax1.set_xlabel("frame")
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(traces: Sequence, path, labels: Sequence[str] = ("coarse", "fine")):
    """Best objective value against evaluations for each registration level."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for tr, lab in zip(traces, labels):
        h = np.array(tr.history)
        if h.size:
            ax.plot(h[:, 0], h[:, 1], label=lab)
    ax.set_xlabel("evaluation")
    ax.set_ylabel("1 - similarity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
