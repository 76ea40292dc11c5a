"""Closed-form and refined pose estimators.

* :func:`rigid_point_register` -- least-squares rigid fit of two 3D point
  sets (SVD of the cross-covariance, reflection corrected).
* :func:`dlt_projection` -- Hartley-normalised DLT for a 3x4 projection.
* :func:`pnp_pose` -- extrinsic from 2D/3D pairs with known intrinsics:
  DLT or orthogonal-iteration initialisation, then Gauss-Newton on the
  reprojection error.

Functions taking correspondences accept any object with ``p2`` (N, 2)
and ``p3`` (N, 3) arrays, e.g. :class:`fluoronav.fiducials.CorrespondenceSet`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegeneracyWarning,
    DegenerateConfiguration,
    InsufficientPoints,
    NoConvergence,
)
from .geometry import (
    Intrinsics,
    PoseParams,
    ProjectionMatrix,
    RigidTransform,
    compose,
    intrinsics_matrix,
    orthonormalize,
    pose_to_transform,
)

log = logging.getLogger(__name__)

COPLANAR_TOL = 1e-6
FD_STEP = 1e-6


@dataclass(frozen=True)
class PointRegistrationResult:
    transform: RigidTransform
    fre_rms: float


def _as_points(a, dim) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"expected an (N, {dim}) array, got shape {a.shape}")
    return a


def _pairs(c):
    return _as_points(c.p2, 2), _as_points(c.p3, 3)


def spread_singular_values(points) -> np.ndarray:
    """Singular values of the centred point cloud, descending."""
    p = np.asarray(points, dtype=float)
    return np.linalg.svd(p - p.mean(axis=0), compute_uv=False)


def is_coplanar(points, tol: float = COPLANAR_TOL) -> bool:
    s = spread_singular_values(points)
    if len(s) < 3:
        return True
    return bool(s[2] <= tol * max(s[0], 1e-300))


def rigid_point_register(src, dst) -> PointRegistrationResult:
    """Rigid transform minimising ``sum |R src_i + t - dst_i|^2``."""
    src = _as_points(src, 3)
    dst = _as_points(dst, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same length")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    s = spread_singular_values(src)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    resid = src @ r.T + t - dst
    fre = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return PointRegistrationResult(RigidTransform(r, t), fre)


def _normalizer(points):
    """Similarity moving the centroid to 0 with mean distance sqrt(dim)."""
    dim = points.shape[1]
    c = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - c, axis=1))
    s = np.sqrt(dim) / max(mean_dist, 1e-300)
    t = np.eye(dim + 1)
    t[:dim, :dim] *= s
    t[:dim, dim] = -s * c
    return t


def dlt_projection(c) -> ProjectionMatrix:
    """Projection matrix from >= 6 non-coplanar 2D/3D correspondences."""
    p2, p3 = _pairs(c)
    n = len(p2)
    if n < 6 or len(p3) != n:
        raise InsufficientPoints(f"DLT needs >= 6 correspondences, got {n}")
    if is_coplanar(p3):
        raise DegenerateConfiguration("3D points are coplanar; DLT is undetermined")
    t2, t3 = _normalizer(p2), _normalizer(p3)
    x = np.hstack([p3, np.ones((n, 1))]) @ t3.T
    uv = (np.hstack([p2, np.ones((n, 1))]) @ t2.T)[:, :2]
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = x
    a[0::2, 8:12] = -uv[:, :1] * x
    a[1::2, 4:8] = x
    a[1::2, 8:12] = -uv[:, 1:2] * x
    _, _, vt = np.linalg.svd(a)
    pn = vt[-1].reshape(3, 4)
    proj = ProjectionMatrix(np.linalg.solve(t2, pn @ t3))
    log.debug("DLT reprojection rms %.3g px", projection_rms(proj, p2, p3))
    return proj


def projection_rms(p: ProjectionMatrix, p2, p3) -> float:
    h = np.asarray(p3) @ p.m[:, :3].T + p.m[:, 3]
    uv = h[:, :2] / h[:, 2:3]
    return float(np.sqrt(np.mean(np.sum((uv - p2) ** 2, axis=1))))


def _project(k: Intrinsics, r, t, p3):
    xs = p3 @ r.T + t
    z = xs[:, 2]
    if np.any(z <= 0):
        return None
    u0, v0 = k.principal_point
    return np.stack([k.focal_u * xs[:, 0] / z + u0, k.focal_v * xs[:, 1] / z + v0], axis=1)


def reprojection_rms(k: Intrinsics, extrinsic: RigidTransform, p2, p3) -> float:
    uv = _project(k, extrinsic.rotation, extrinsic.translation, np.asarray(p3, float))
    if uv is None:
        return float("inf")
    return float(np.sqrt(np.mean(np.sum((uv - p2) ** 2, axis=1))))


def _extrinsic_from_dlt(p: ProjectionMatrix, k: Intrinsics) -> RigidTransform:
    # tolerant version of decompose_projection for noisy DLT estimates
    a = np.linalg.solve(intrinsics_matrix(k), p.m)
    s = np.mean(np.linalg.svd(a[:, :3], compute_uv=False))
    return RigidTransform(orthonormalize(a[:, :3] / s), a[:, 3] / s)


def _orthogonal_iteration(k: Intrinsics, p2, p3, iters: int = 200) -> RigidTransform:
    """Object-space collinearity fit of Lu, Hager & Mjolsness.

    Starts from a fronto-parallel guess (all points at one depth chosen from
    the 3D/2D spread ratio), alternating the optimal translation for fixed R
    with a Procrustes fit of the model to its projection onto the rays.
    """
    kinv = np.linalg.inv(intrinsics_matrix(k))
    v = np.hstack([p2, np.ones((len(p2), 1))]) @ kinv.T
    proj = np.einsum("ni,nj->nij", v, v) / np.sum(v * v, axis=1)[:, None, None]
    n = len(p3)
    f_mean = proj.mean(axis=0)
    t_fac = np.linalg.inv(np.eye(3) - f_mean) / n

    rms3 = np.sqrt(np.mean(np.sum((p3 - p3.mean(0)) ** 2, axis=1)))
    rms2 = np.sqrt(np.mean(np.sum((p2 - p2.mean(0)) ** 2, axis=1)))
    depth = np.sqrt(k.focal_u * k.focal_v) * rms3 / max(rms2, 1e-9)
    q = v / v[:, 2:3] * depth
    r = rigid_point_register(p3, q).transform.rotation

    def opt_t(r):
        rp = p3 @ r.T
        return t_fac @ np.einsum("nij,nj->i", proj - np.eye(3), rp)

    t = opt_t(r)
    prev = np.inf
    for _ in range(iters):
        rp = p3 @ r.T + t
        q = np.einsum("nij,nj->ni", proj, rp)
        err = float(np.sum((q - rp) ** 2))
        r = rigid_point_register(p3, q).transform.rotation
        t = opt_t(r)
        if abs(prev - err) <= 1e-14 * max(err, 1e-300) or err < 1e-24:
            break
        prev = err
    return RigidTransform(r, t)


def _gauss_newton(k, p2, p3, start: RigidTransform, max_iter=100, step_tol=1e-10):
    """Refine ``start`` by Gauss-Newton on the stacked reprojection residual.

    The pose increment is a PoseParams vector rotating about the current
    position of the point centroid; the Jacobian uses forward differences.
    Steps that do not lower the cost are halved, so the cost is monotone.
    """
    centroid = p3.mean(axis=0)

    def residual(t: RigidTransform):
        uv = _project(k, t.rotation, t.translation, p3)
        return None if uv is None else (uv - p2).ravel()

    def moved(t: RigidTransform, delta):
        c = t.rotation @ centroid + t.translation
        return compose(pose_to_transform(PoseParams(delta[:3], delta[3:], c)), t)

    cur = start
    r = residual(cur)
    if r is None:
        raise NoConvergence("initial pose puts points behind the source")
    cost = float(r @ r)
    for _ in range(max_iter):
        jac = np.empty((r.size, 6))
        ok = True
        for i in range(6):
            d = np.zeros(6)
            d[i] = FD_STEP
            ri = residual(moved(cur, d))
            if ri is None:
                ok = False
                break
            jac[:, i] = (ri - r) / FD_STEP
        if not ok:
            break
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        accepted = False
        for _ in range(30):
            cand = moved(cur, step)
            rc = residual(cand)
            if rc is not None:
                cc = float(rc @ rc)
                if cc < cost:
                    cur, r, cost, accepted = cand, rc, cc, True
                    break
            step = step / 2.0
        if not accepted or np.linalg.norm(step) < step_tol:
            break
    return cur, cost


def pnp_pose(c, k: Intrinsics, init: Optional[RigidTransform] = None) -> RigidTransform:
    """Extrinsic (model frame -> source frame) from >= 4 correspondences.

    Emits :class:`DegeneracyWarning` when the 3D points are coplanar: such
    single-layer constellations admit near-equivalent mirrored poses.
    """
    p2, p3 = _pairs(c)
    n = len(p2)
    if n < 4 or len(p3) != n:
        raise InsufficientPoints(f"PnP needs >= 4 correspondences, got {n}")
    planar = is_coplanar(p3)
    if planar:
        warnings.warn(
            f"{n} coplanar fiducials: pose may be ambiguous", DegeneracyWarning, stacklevel=2
        )
    if init is not None:
        start = init
    elif n >= 6 and not planar:
        start = _extrinsic_from_dlt(dlt_projection(c), k)
    else:
        start = _orthogonal_iteration(k, p2, p3)
    init_rms = reprojection_rms(k, start, p2, p3)
    if not np.isfinite(init_rms):
        # a DLT/OI start behind the source: retry from the object-space fit
        start = _orthogonal_iteration(k, p2, p3)
        init_rms = reprojection_rms(k, start, p2, p3)
    pose, cost = _gauss_newton(k, p2, p3, start)
    rms = float(np.sqrt(cost / n))
    if not np.isfinite(rms) or rms > 10.0 * max(init_rms, 1e-12):
        raise NoConvergence(f"PnP refinement failed (rms {rms:.3g} px)")
    return pose
