"""Fiducial detection in residual images and CT, and 2D/3D correspondence.

The fiducial constellation lives on the two-layer field-generator mounting
frame (frame ``FG``). Detection is connected-component based; matching is
a seeded RANSAC whose hypotheses are minimal 4-point PnP solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import MatchFailed, NoConvergence, ParseError
from .geometry import (
    Intrinsics,
    RigidTransform,
    rot_x,
    rot_y,
    rot_z,
)
from .imaging import AIR_HU, Image2D, Volume3D
from .pose import pnp_pose, reprojection_rms, spread_singular_values

log = logging.getLogger(__name__)

LAYERS = ("top", "bottom")


@dataclass(frozen=True)
class FiducialModel:
    """Labelled 3D fiducial constellation (mm, frame FG)."""

    labels: np.ndarray
    positions: np.ndarray
    layers: Tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        layers = tuple(self.layers)
        if not (len(labels) == len(pos) == len(layers)):
            raise ValueError("labels, positions and layers must align")
        if len(set(labels.tolist())) != len(labels):
            raise ValueError("fiducial labels must be unique")
        bad = set(layers) - set(LAYERS)
        if bad:
            raise ValueError(f"unknown layer tags {sorted(bad)}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "layers", layers)

    def __len__(self):
        return len(self.labels)

    def coplanarity(self) -> float:
        """Smallest singular value of the centred positions (mm).

        Near zero for single-layer subsets, which makes pose estimation
        ill-conditioned.
        """
        s = spread_singular_values(self.positions)
        return float(s[2]) if len(s) > 2 else 0.0

    def layer_counts(self) -> Tuple[int, int]:
        return (self.layers.count("top"), self.layers.count("bottom"))

    def position_of(self, label: int) -> np.ndarray:
        return self.positions[self._index(label)]

    def _index(self, label):
        hits = np.nonzero(self.labels == label)[0]
        if len(hits) == 0:
            raise KeyError(label)
        return int(hits[0])

    def subset(self, labels: Sequence[int]) -> "FiducialModel":
        idx = [self._index(lbl) for lbl in labels]
        return FiducialModel(
            self.labels[idx], self.positions[idx], tuple(self.layers[i] for i in idx)
        )


def save_fiducial_model(model: FiducialModel, path):
    lines = ["# label x y z layer (mm, FG frame)"]
    for lbl, p, layer in zip(model.labels, model.positions, model.layers):
        lines.append(f"{lbl} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {layer}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_fiducial_model(path) -> FiducialModel:
    labels, pos, layers = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or parts[4] not in LAYERS:
            raise ParseError(f"expected 'label x y z layer', got {line!r}", n)
        try:
            labels.append(int(parts[0]))
            pos.append([float(x) for x in parts[1:4]])
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
        layers.append(parts[4])
    try:
        return FiducialModel(labels, np.array(pos).reshape(-1, 3), tuple(layers))
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


@dataclass
class CorrespondenceSet:
    """Matched 2D (px) / 3D (mm) fiducial pairs."""

    labels: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    inliers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        self.p2 = np.asarray(self.p2, dtype=float).reshape(-1, 2)
        self.p3 = np.asarray(self.p3, dtype=float).reshape(-1, 3)
        if self.inliers is None:
            self.inliers = np.ones(len(self.labels), dtype=bool)
        self.inliers = np.asarray(self.inliers, dtype=bool)
        if not (len(self.labels) == len(self.p2) == len(self.p3) == len(self.inliers)):
            raise ValueError("correspondence arrays must align")

    def __len__(self):
        return len(self.labels)

    def select(self, mask) -> "CorrespondenceSet":
        mask = np.asarray(mask)
        return CorrespondenceSet(
            self.labels[mask], self.p2[mask], self.p3[mask], self.inliers[mask]
        )

    def inlier_set(self) -> "CorrespondenceSet":
        return self.select(self.inliers)


def save_correspondences(c: CorrespondenceSet, path):
    lines = ["# label u v x y z (px, mm)"]
    for lbl, uv, x in zip(c.labels, c.p2, c.p3):
        lines.append(f"{lbl} " + " ".join(repr(float(v)) for v in (*uv, *x)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences(path) -> CorrespondenceSet:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 'label u v x y z', got {line!r}", n)
        try:
            rows.append([int(parts[0])] + [float(x) for x in parts[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
    a = np.array(rows, dtype=float).reshape(-1, 6)
    return CorrespondenceSet(a[:, 0].astype(int), a[:, 1:3], a[:, 3:6])


# -- detection -----------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)
_TWENTY_SIX = np.ones((3, 3, 3), dtype=bool)


def detect_blobs_2d(
    img: Image2D,
    min_area_px: int = 4,
    max_area_px: int = 20000,
    threshold_quantile: float = 0.5,
) -> np.ndarray:
    """Intensity-weighted centroids ``(u, v)`` of bright spots.

    The image is binarised at ``threshold_quantile`` of its non-zero pixel
    values; 8-connected components with an area in ``[min, max]`` are kept
    and returned in order of decreasing total intensity.
    """
    px = img.pixels
    nonzero = px[px != 0]
    if nonzero.size == 0:
        return np.zeros((0, 2))
    thr = np.quantile(nonzero, threshold_quantile)
    mask = (px >= thr) & (px != 0)
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return np.zeros((0, 2))
    index = np.arange(1, n + 1)
    area = ndimage.sum_labels(np.ones_like(px), lab, index)
    total = ndimage.sum_labels(px, lab, index)
    keep = (area >= min_area_px) & (area <= max_area_px)
    if not np.any(keep):
        return np.zeros((0, 2))
    com = np.array(ndimage.center_of_mass(px, lab, index[keep])).reshape(-1, 2)
    order = np.argsort(-total[keep], kind="stable")
    return com[order][:, ::-1].copy()


def extract_fiducials_3d(
    v: Volume3D, hu_threshold: float = 2200.0, min_voxels: int = 5, rim_vox: int = 1
) -> np.ndarray:
    """Centroids (mm) of 26-connected components above ``hu_threshold``.

    The weighted centroid also covers a ``rim_vox`` shell around each
    component, weighted by attenuation above air, so partial-volume voxels
    at the sphere surface pull the estimate to the true centre; with
    ``rim_vox=0`` only the thresholded voxels count.
    """
    vox = v.voxels
    lab, n = ndimage.label(vox > hu_threshold, structure=_TWENTY_SIX)
    if n == 0:
        return np.zeros((0, 3))
    index = np.arange(1, n + 1)
    size = ndimage.sum_labels(np.ones(vox.shape), lab, index)
    keep = index[size >= min_voxels]
    if len(keep) == 0:
        return np.zeros((0, 3))
    weight = np.maximum(vox.astype(float) - AIR_HU, 0.0)
    if rim_vox > 0:
        # grey dilation grows labels into unlabelled neighbours; where two
        # grown components would meet the larger label wins, which is
        # harmless for well separated fiducials
        grown = ndimage.grey_dilation(lab, footprint=_TWENTY_SIX, mode="constant", cval=0)
        for _ in range(rim_vox - 1):
            grown = ndimage.grey_dilation(grown, footprint=_TWENTY_SIX, mode="constant", cval=0)
        lab = np.where(lab > 0, lab, grown)
    # centre_of_mass returns (z, y, x) indices
    com = np.array(ndimage.center_of_mass(weight, lab, keep)).reshape(-1, 3)
    return v.index_to_world(com[:, ::-1])


def suppress_fiducials(
    v: Volume3D, hu_threshold: float = 2200.0, max_extent_mm: float = 8.0, margin_vox: int = 2
) -> Volume3D:
    """Replace compact bright components (fiducial spheres) and their
    partial-volume rim by air. Components longer than ``max_extent_mm``
    along any axis, such as stent wires, are kept."""
    lab, n = ndimage.label(v.voxels > hu_threshold, structure=_TWENTY_SIX)
    if n == 0:
        return v
    sp = (v.spacing[2], v.spacing[1], v.spacing[0])
    compact = np.zeros(n + 1, dtype=bool)
    for i, box in enumerate(ndimage.find_objects(lab), 1):
        compact[i] = max((sl.stop - sl.start) * s for sl, s in zip(box, sp)) <= max_extent_mm
    blob = ndimage.binary_dilation(compact[lab], _TWENTY_SIX, iterations=margin_vox)
    vox = v.voxels.copy()
    vox[blob] = AIR_HU
    return Volume3D(vox, v.spacing, v.origin)


# -- matching --------------------------------------------------------------------

def greedy_assign(uv_model: np.ndarray, blobs: np.ndarray, tol: float):
    """Greedy nearest-neighbour pairing; returns (model_idx, blob_idx, dist)."""
    if len(uv_model) == 0 or len(blobs) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    d = np.linalg.norm(uv_model[:, None, :] - blobs[None, :, :], axis=2)
    mi, bi = np.nonzero(d < tol)
    if len(mi) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    dist = d[mi, bi]
    order = np.lexsort((bi, mi, dist))
    used_m, used_b = set(), set()
    out_m, out_b, out_d = [], [], []
    for o in order:
        m, b = mi[o], bi[o]
        if m in used_m or b in used_b:
            continue
        used_m.add(m)
        used_b.add(b)
        out_m.append(m)
        out_b.append(b)
        out_d.append(dist[o])
    return np.array(out_m, int), np.array(out_b, int), np.array(out_d)


def _project_model(k: Intrinsics, pose: RigidTransform, pts: np.ndarray):
    xs = pts @ pose.rotation.T + pose.translation
    if np.any(xs[:, 2] <= 0):
        return None
    u0, v0 = k.principal_point
    return np.stack(
        [k.focal_u * xs[:, 0] / xs[:, 2] + u0, k.focal_v * xs[:, 1] / xs[:, 2] + v0], axis=1
    )


def _spread(p2):
    # median-based centre and radius resist spurious detections
    c = np.median(p2, axis=0)
    return c, float(np.median(np.linalg.norm(p2 - c, axis=1)))


def _prior_pose(k: Intrinsics, rot: np.ndarray, pts: np.ndarray, blobs: np.ndarray):
    """Place the rotated model so its projected centre and spread match
    the blob cloud (weak-perspective depth estimate)."""
    rp = pts @ rot.T
    c3, spread3 = _spread(rp[:, :2])
    c2, spread2 = _spread(blobs)
    f = np.sqrt(k.focal_u * k.focal_v)
    depth = f * spread3 / max(spread2, 1e-9)
    u0, v0 = k.principal_point
    target = np.array(
        [(c2[0] - u0) * depth / k.focal_u, (c2[1] - v0) * depth / k.focal_v, depth]
    )
    return RigidTransform(rot, target - np.array([c3[0], c3[1], np.median(rp[:, 2])]))


@dataclass
class _Hypothesis:
    inliers: int
    rms: float
    index: int
    pose: RigidTransform
    model_idx: np.ndarray = field(repr=False)
    blob_idx: np.ndarray = field(repr=False)

    def key(self):
        # larger inlier count, then smaller residual, then earliest hypothesis
        return (-self.inliers, self.rms, self.index)


def _refine(k, pose, pts, blobs, tol, rounds=3):
    """Local optimisation: re-solve PnP on all inliers and re-score."""
    best = None
    for _ in range(rounds):
        uv = _project_model(k, pose, pts)
        if uv is None:
            break
        mi, bi, d = greedy_assign(uv, blobs, tol)
        score = (len(mi), float(np.sqrt(np.mean(d**2))) if len(d) else np.inf)
        if best is not None and (score[0] < best[0] or (score[0] == best[0] and score[1] >= best[1])):
            break
        best = (score[0], score[1], pose, mi, bi)
        if len(mi) < 4:
            break
        try:
            pose = _quiet_pnp(blobs[bi], pts[mi], k, pose)
        except NoConvergence:
            break
    return best


def _quiet_pnp(p2, p3, k, init):
    import warnings

    from .errors import DegeneracyWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        return pnp_pose(CorrespondenceSet(np.zeros(len(p2), int), p2, p3), k, init=init)


def match_2d_3d(
    blobs,
    model: FiducialModel,
    k: Intrinsics,
    iters: int = 2000,
    reproj_tol_px: float = 3.0,
    seed: int = 0,
    envelope_deg: float = 45.0,
    roll_deg: float = 20.0,
) -> CorrespondenceSet:
    """Label detected 2D blobs with model fiducials.

    Each RANSAC hypothesis draws a viewing orientation from the C-arm
    envelope (angular/orbital within ``envelope_deg``, in-plane roll within
    ``roll_deg``), places the model to match the blob cloud, pairs model
    projections with blobs, and solves a minimal PnP on four sampled pairs.
    Hypotheses are scored by greedy nearest-neighbour inliers within
    ``reproj_tol_px``, refined on their inliers, and reduced by
    ``(inliers, -rms, index)``. The first hypothesis is the nominal AP view.
    """
    blobs = np.asarray(blobs, dtype=float).reshape(-1, 2)
    if len(blobs) < 4 or len(model) < 4:
        raise MatchFailed(f"need >= 4 blobs and model points ({len(blobs)} blobs)")
    pts = model.positions
    rng = np.random.default_rng(seed)
    full = min(len(blobs), len(pts))
    best: Optional[_Hypothesis] = None
    stall = 0
    env, roll = np.radians(envelope_deg), np.radians(roll_deg)
    blob_spread = _spread(blobs)[1]
    for h in range(iters):
        if h == 0:
            rot = np.eye(3)
        else:
            a, o, r = rng.uniform(-env, env), rng.uniform(-env, env), rng.uniform(-roll, roll)
            rot = rot_z(r) @ rot_x(o) @ rot_y(a)
        prior = _prior_pose(k, rot, pts, blobs)
        uv = _project_model(k, prior, pts)
        if uv is None:
            continue
        mi, bi, _ = greedy_assign(uv, blobs, max(0.3 * blob_spread, reproj_tol_px))
        if len(mi) < 4:
            continue
        pick = rng.choice(len(mi), size=4, replace=False)
        try:
            pose = _quiet_pnp(blobs[bi[pick]], pts[mi[pick]], k, prior)
        except NoConvergence:
            continue
        res = _refine(k, pose, pts, blobs, reproj_tol_px)
        if res is None or res[0] < 4:
            continue
        cand = _Hypothesis(res[0], res[1], h, res[2], res[3], res[4])
        if best is None or cand.key() < best.key():
            best, stall = cand, 0
        else:
            stall += 1
        if best.inliers == full and best.rms < reproj_tol_px / 3.0:
            break
        if best.inliers >= 6 and stall >= 300:
            break
    if best is None:
        raise MatchFailed("no hypothesis reached 4 inliers")
    log.debug("matched %d fiducials (rms %.3f px, hypothesis %d)", best.inliers, best.rms, best.index)
    order = np.argsort(model.labels[best.model_idx], kind="stable")
    mi, bi = best.model_idx[order], best.blob_idx[order]
    return CorrespondenceSet(model.labels[mi], blobs[bi], pts[mi])


def induced_pose(c: CorrespondenceSet, k: Intrinsics) -> Tuple[RigidTransform, float]:
    """PnP pose of a correspondence set and its reprojection RMS (px)."""
    pose = pnp_pose(c.inlier_set(), k)
    return pose, reprojection_rms(k, pose, c.p2, c.p3)
