"""Frame chains for the 2D virtual roadmap and 3D instrument tracking.

Frames: tool -> MT (tracker) -> FG (field generator) -> source (C-arm) ->
image, and patient (CT) -> source. ``T_a^b`` maps points from frame ``a``
into frame ``b``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateDirection, DepthNonPositive, ParseError
from .geometry import (
    Intrinsics,
    ProjectionMatrix,
    RigidTransform,
    apply,
    build_projection,
    compose,
    invert,
    project,
    rot_x,
    rot_y,
)

SHAFT_MM = 50.0
STREAM_HEADER = ["t"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]


@dataclass(frozen=True)
class TrackedTool:
    """Instrument geometry in its own frame plus the tracked pose ``T_tool^MT``."""

    tip: np.ndarray
    direction: np.ndarray
    pose: RigidTransform

    def __post_init__(self):
        tip = np.asarray(self.tip, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise DegenerateDirection("tool direction is the zero vector")
        object.__setattr__(self, "tip", tip)
        object.__setattr__(self, "direction", d / n)

    def shaft_point(self, length: float = SHAFT_MM) -> np.ndarray:
        return self.tip - length * self.direction

    def with_pose(self, pose: RigidTransform) -> "TrackedTool":
        return TrackedTool(self.tip, self.direction, pose)


def needle(pose: RigidTransform = RigidTransform.identity()) -> TrackedTool:
    """Straight needle with its tip at the tool origin, pointing along +z."""
    return TrackedTool(np.zeros(3), np.array([0.0, 0.0, 1.0]), pose)


@dataclass(frozen=True)
class RoadmapOverlay:
    tip_px: np.ndarray
    shaft_px: np.ndarray
    frame_index: int = 0


@dataclass(frozen=True)
class TipAngleError:
    euclid_mm: float
    signed_x_mm: float
    signed_y_mm: float
    angle_deg: float

    def row(self) -> List[str]:
        return [f"{v:.6g}" for v in (self.euclid_mm, self.signed_x_mm, self.signed_y_mm, self.angle_deg)]


def fg_projection(k: Intrinsics, t_fg_source: RigidTransform) -> ProjectionMatrix:
    """``K [R|t]`` taking FG-frame points to image pixels."""
    return build_projection(k, t_fg_source)


def tool_to_image(tool: TrackedTool, t_mt_fg: RigidTransform, p_fg: ProjectionMatrix,
                  frame_index: int = 0, shaft_mm: float = SHAFT_MM) -> RoadmapOverlay:
    """Project the tool tip and a shaft point through ``P_FG T_MT^FG T_tool^MT``."""
    chain = compose(t_mt_fg, tool.pose)
    pts = apply(chain, np.stack([tool.tip, tool.shaft_point(shaft_mm)]))
    if np.any(p_fg.depth(pts) <= 0):
        raise DepthNonPositive("tool projects from behind the source")
    uv = project(p_fg, pts)
    return RoadmapOverlay(uv[0], uv[1], frame_index)


def tool_to_patient(tool: TrackedTool, t_mt_fg: RigidTransform, t_fg_source: RigidTransform,
                    t_patient_source: RigidTransform) -> RigidTransform:
    """``T_tool^patient = (T_patient^source)^-1 T_FG^source T_MT^FG T_tool^MT``."""
    return compose(invert(t_patient_source), compose(t_fg_source, compose(t_mt_fg, tool.pose)))


def _angle_deg(a, b) -> float:
    # atan2 form stays accurate for nearly parallel vectors
    cross = a[0] * b[1] - a[1] * b[0]
    return float(np.degrees(abs(np.arctan2(cross, float(np.dot(a, b))))))


def score_roadmap(overlay: RoadmapOverlay, gt_tip_px, gt_shaft_px, pixel_spacing) -> TipAngleError:
    gt_tip = np.asarray(gt_tip_px, dtype=float)
    gt_shaft = np.asarray(gt_shaft_px, dtype=float)
    gt_dir = gt_tip - gt_shaft
    if not np.any(gt_dir):
        raise DegenerateDirection("ground-truth tip and shaft points coincide")
    sp = np.broadcast_to(np.asarray(pixel_spacing, dtype=float), (2,))
    d = (np.asarray(overlay.tip_px, dtype=float) - gt_tip) * sp
    ov_dir = np.asarray(overlay.tip_px, dtype=float) - np.asarray(overlay.shaft_px, dtype=float)
    # angles are measured in detector mm so anisotropic pixels do not skew them
    return TipAngleError(float(np.hypot(d[0], d[1])), float(d[0]), float(d[1]),
                         _angle_deg(gt_dir * sp, ov_dir * sp))


def predicted_tip_error(sigma_mm: float, k: Intrinsics, depth_mm) -> float:
    """Expected 2D tip error (detector mm) under isotropic tracking noise.

    The in-plane components of the noise, magnified by ``sid / depth``, are
    a 2D Gaussian whose radius follows a Rayleigh law with mean
    ``sigma * sqrt(pi / 2)``. Depth noise only changes the magnification and
    is a second-order effect.
    """
    depth = np.asarray(depth_mm, dtype=float)
    return float(np.mean(sigma_mm * (k.sid / depth) * np.sqrt(np.pi / 2)))


# -- pose streams --------------------------------------------------------------------------


def write_pose_stream(path, times: Sequence[float], poses: Sequence[RigidTransform]):
    if len(times) != len(poses):
        raise ValueError("one timestamp per pose")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STREAM_HEADER)
        for t, p in zip(times, poses):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in p.rotation.ravel()]
                       + [repr(float(v)) for v in p.translation])


def iter_pose_stream(path) -> Iterator[Tuple[float, RigidTransform]]:
    """Yield ``(t, T_tool^MT)`` per row; malformed rows raise ParseError with the line."""
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if n == 1 and row[0].strip() == "t":
                continue
            if len(row) != len(STREAM_HEADER):
                raise ParseError(f"expected {len(STREAM_HEADER)} fields, got {len(row)}", n)
            try:
                vals = np.array([float(x) for x in row])
            except ValueError as exc:
                raise ParseError(str(exc), n) from exc
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", n)
            try:
                pose = RigidTransform(vals[1:10].reshape(3, 3), vals[10:13])
            except ValueError as exc:
                raise ParseError(str(exc), n) from exc
            yield float(vals[0]), pose


def read_pose_stream(path) -> Tuple[np.ndarray, List[RigidTransform]]:
    rows = list(iter_pose_stream(path))
    return np.array([r[0] for r in rows]), [r[1] for r in rows]


def insertion_path(entry_patient, target_patient, t_patient_fg: RigidTransform,
                   t_mt_fg: RigidTransform, n_frames: int, rate_hz: float = 20.0):
    """Tool poses ``T_tool^MT`` for a straight insertion from entry to target.

    The needle frame has +z along the insertion direction; the tip moves at
    constant speed and reaches the target on the last frame.
    """
    a = np.asarray(entry_patient, dtype=float)
    b = np.asarray(target_patient, dtype=float)
    d = b - a
    if np.linalg.norm(d) == 0:
        raise DegenerateDirection("entry and target coincide")
    z = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    r = np.stack([x, np.cross(z, x), z], axis=1)
    to_mt = compose(invert(t_mt_fg), t_patient_fg)
    times, poses = [], []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        tool_patient = RigidTransform(r, a + s * d)
        times.append(i / rate_hz)
        poses.append(compose(to_mt, tool_patient))
    return np.array(times), poses


def jitter_tips(poses: Sequence[RigidTransform], sigma_mm: float, seed: int = 0) -> List[RigidTransform]:
    """Add isotropic Gaussian noise to each tip position in the tracker frame.

    The tip sits at the tool origin, so this perturbs only the translation.
    """
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma_mm, size=(len(poses), 3))
    return [RigidTransform(p.rotation, p.translation + e) for p, e in zip(poses, noise)]


# -- drawing -------------------------------------------------------------------------------


def bresenham(p0, p1) -> np.ndarray:
    """Integer pixel ``(u, v)`` pairs on the 1-px line from ``p0`` to ``p1``."""
    x0, y0 = (int(round(c)) for c in p0)
    x1, y1 = (int(round(c)) for c in p1)
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return np.array(out, dtype=int)


def draw_overlay(base: np.ndarray, overlay: RoadmapOverlay, value: float = 1.0,
                 tip_radius: int = 3) -> np.ndarray:
    """Copy of ``base`` with the shaft stroke and a small tip cross drawn in."""
    img = np.array(base, dtype=float, copy=True)
    h, w = img.shape

    def put(pts):
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        img[pts[keep, 1], pts[keep, 0]] = value

    put(bresenham(overlay.shaft_px, overlay.tip_px))
    tu, tv = overlay.tip_px
    put(bresenham((tu - tip_radius, tv), (tu + tip_radius, tv)))
    put(bresenham((tu, tv - tip_radius), (tu, tv + tip_radius)))
    return img


def replay(poses: Sequence[RigidTransform], truth: Sequence[RigidTransform], tool: TrackedTool,
           t_mt_fg: RigidTransform, p_fg: ProjectionMatrix, p_fg_true: Optional[ProjectionMatrix],
           pixel_spacing) -> Tuple[List[RoadmapOverlay], List[TipAngleError]]:
    """Overlay every measured pose and score it against the true tool's projection."""
    if len(poses) != len(truth):
        raise ValueError(f"{len(poses)} measured poses vs {len(truth)} truth poses")
    p_true = p_fg if p_fg_true is None else p_fg_true
    overlays, errors = [], []
    for i, (m, g) in enumerate(zip(poses, truth)):
        ov = tool_to_image(tool.with_pose(m), t_mt_fg, p_fg, i)
        gt = tool_to_image(tool.with_pose(g), t_mt_fg, p_true, i)
        overlays.append(ov)
        errors.append(score_roadmap(ov, gt.tip_px, gt.shaft_px, pixel_spacing))
    return overlays, errors


def tip_depths(poses: Sequence[RigidTransform], tool: TrackedTool, t_mt_fg: RigidTransform,
               t_fg_source: RigidTransform) -> np.ndarray:
    chain = compose(t_fg_source, t_mt_fg)
    return np.array([apply(compose(chain, p), tool.tip)[2] for p in poses])


def default_entry(target, angular_deg: float = 20.0, orbital_deg: float = 10.0, length: float = 80.0):
    """Entry point ``length`` mm from ``target``, roughly towards the source at AP."""
    d = rot_y(np.radians(angular_deg)) @ rot_x(np.radians(orbital_deg)) @ np.array([0.0, 0.0, -1.0])
    return np.asarray(target, dtype=float) + length * d
