"""Rigid transforms, C-arm intrinsics and the pinhole projection model.

Camera convention used throughout the package: the X-ray source sits at
the origin of the source frame, the detector plane is ``z = sid`` and
``+z`` points from the source toward the detector. Image ``u`` grows with
``+x`` and ``v`` grows with ``+y``; there is no detector flip.

A ``RigidTransform`` maps points of its *from* frame into its *to* frame,
so ``T_patient^source`` applied to a CT point gives source coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DepthNonPositive, IntrinsicsMismatch

ORTHO_TOL = 1e-9
DRIFT_TOL = 1e-12


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``r`` (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_drift(r: np.ndarray) -> float:
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if rotation_drift(r) > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 4x4 homogeneous or 3x4 ``[R | t]`` matrix."""
        m = np.asarray(m, dtype=float)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected 4x4 or 3x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __call__(self, p):
        return apply(self, p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if rotation_drift(r) > DRIFT_TOL:
        r = orthonormalize(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def apply(t: RigidTransform, p) -> np.ndarray:
    """Map a point ``(3,)`` or a stack of points ``(N, 3)``."""
    p = np.asarray(p, dtype=float)
    return p @ t.rotation.T + t.translation


def translation(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), [x, y, z])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (rad) of a rotation matrix."""
    # atan2 form keeps full precision near the identity, unlike arccos
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def rotation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return rotation_angle(a.rotation.T @ b.rotation)


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole model of a C-arm detector.

    ``sid`` (source-to-detector distance, mm) plays the role of the focal
    length; the principal point defaults to the image centre in pixel
    index coordinates, ``((w - 1) / 2, (h - 1) / 2)``.
    """

    sid: float
    pixel_spacing_u: float
    pixel_spacing_v: float
    image_width: int
    image_height: int
    principal_point: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.sid <= 0 or self.pixel_spacing_u <= 0 or self.pixel_spacing_v <= 0:
            raise ValueError("sid and pixel spacings must be positive")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.principal_point is None:
            pp = ((self.image_width - 1) / 2.0, (self.image_height - 1) / 2.0)
        else:
            pp = (float(self.principal_point[0]), float(self.principal_point[1]))
        object.__setattr__(self, "principal_point", pp)

    @property
    def focal_u(self) -> float:
        return self.sid / self.pixel_spacing_u

    @property
    def focal_v(self) -> float:
        return self.sid / self.pixel_spacing_v

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.image_height, self.image_width)


def intrinsics_matrix(k: Intrinsics) -> np.ndarray:
    u0, v0 = k.principal_point
    return np.array([[k.focal_u, 0.0, u0], [0.0, k.focal_v, v0], [0.0, 0.0, 1.0]])


def downsample_intrinsics(k: Intrinsics, factor: int) -> Intrinsics:
    """Intrinsics of the detector after ``factor`` x ``factor`` block averaging.

    The SID is unchanged; pixel spacing grows by ``factor`` and the principal
    point is re-expressed in the coarse pixel grid, where coarse pixel ``j``
    is centred on fine coordinate ``j * factor + (factor - 1) / 2``.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return k
    u0, v0 = k.principal_point
    off = (factor - 1) / 2.0
    return Intrinsics(
        sid=k.sid,
        pixel_spacing_u=k.pixel_spacing_u * factor,
        pixel_spacing_v=k.pixel_spacing_v * factor,
        image_width=k.image_width // factor,
        image_height=k.image_height // factor,
        principal_point=((u0 - off) / factor, (v0 - off) / factor),
    )


def normalize_projection(m: np.ndarray) -> np.ndarray:
    """Fix the projective scale: unit third row (first three entries) and
    ``det(m[:, :3]) > 0`` so points in front of the source get positive depth."""
    m = np.asarray(m, dtype=float)
    n = np.linalg.norm(m[2, :3])
    if n == 0:
        raise ValueError("projection matrix has a null third row")
    m = m / n
    if np.linalg.det(m[:, :3]) < 0:
        m = -m
    return m


@dataclass(frozen=True)
class ProjectionMatrix:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 4):
            raise ValueError("projection matrix must be 3x4")
        object.__setattr__(self, "m", _readonly(normalize_projection(m)))

    def depth(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.m[2, :3] + self.m[2, 3]


def project(p: ProjectionMatrix, x) -> np.ndarray:
    """Perspective projection of ``(3,)`` or ``(N, 3)`` points to pixels."""
    x = np.asarray(x, dtype=float)
    h = x @ p.m[:, :3].T + p.m[:, 3]
    depth = h[..., 2]
    if np.any(depth <= 0):
        raise DepthNonPositive("point at or behind the source plane")
    return h[..., :2] / depth[..., None]


def project_points(k: Intrinsics, extrinsic: RigidTransform, x) -> np.ndarray:
    """``K``-then-divide applied to ``apply(extrinsic, x)``."""
    xs = apply(extrinsic, x)
    z = xs[..., 2]
    if np.any(z <= 0):
        raise DepthNonPositive("point at or behind the source plane")
    u0, v0 = k.principal_point
    u = k.focal_u * xs[..., 0] / z + u0
    v = k.focal_v * xs[..., 1] / z + v0
    return np.stack([u, v], axis=-1)


def backproject(k: Intrinsics, uv) -> np.ndarray:
    """Point on the detector plane (source frame, mm) hit by pixel ``uv``.

    The ray from the source through that point is the viewing ray of ``uv``.
    """
    uv = np.asarray(uv, dtype=float)
    u0, v0 = k.principal_point
    x = (uv[..., 0] - u0) * k.pixel_spacing_u
    y = (uv[..., 1] - v0) * k.pixel_spacing_v
    return np.stack([x, y, np.full_like(x, k.sid)], axis=-1)


def build_projection(k: Intrinsics, extrinsic: RigidTransform) -> ProjectionMatrix:
    rt = np.hstack([extrinsic.rotation, extrinsic.translation[:, None]])
    return ProjectionMatrix(intrinsics_matrix(k) @ rt)


def decompose_projection(p: ProjectionMatrix, k: Intrinsics) -> RigidTransform:
    """Recover the extrinsic from a projection matrix with known intrinsics."""
    a = np.linalg.solve(intrinsics_matrix(k), p.m)
    r_raw = a[:, :3]
    # third row of K is (0, 0, 1) and p is normalised, so the scale is fixed
    resid = float(np.max(np.abs(r_raw @ r_raw.T - np.eye(3))))
    if resid > 1e-3:
        raise IntrinsicsMismatch(
            f"orthogonality residual {resid:.3g} exceeds 1e-3; wrong intrinsics?"
        )
    return RigidTransform(orthonormalize(r_raw), a[:, 3])


@dataclass(frozen=True)
class PoseParams:
    """Six-parameter pose: axis-angle rotation about ``center`` plus a shift."""

    rotation_vector: np.ndarray
    translation: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("rotation_vector", "translation", "center"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            object.__setattr__(self, name, _readonly(v))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation_vector, self.translation])


def rotvec_to_matrix(rv) -> np.ndarray:
    return Rotation.from_rotvec(np.array(rv, dtype=float)).as_matrix()


def matrix_to_rotvec(r) -> np.ndarray:
    return Rotation.from_matrix(np.array(r, dtype=float)).as_rotvec()


def pose_to_transform(q: PoseParams) -> RigidTransform:
    """``x -> R (x - c) + c + t`` with ``R`` from the rotation vector."""
    r = rotvec_to_matrix(q.rotation_vector)
    c = q.center
    return RigidTransform(r, c + q.translation - r @ c)


def transform_to_pose(t: RigidTransform, center=(0.0, 0.0, 0.0)) -> PoseParams:
    c = np.asarray(center, dtype=float)
    rv = matrix_to_rotvec(t.rotation)
    return PoseParams(rv, t.translation - c + t.rotation @ c, c)
