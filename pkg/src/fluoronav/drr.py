"""Digitally reconstructed radiographs and simulated fluoroscopy.

DRRs are log-domain images: each pixel holds the attenuation line integral
along the ray from the source through the pixel centre. Samples along a
ray sit on a fixed lattice ``t_k = (k + 1/2) * step`` measured from the
source, restricted to the ray/volume-box intersection. Anchoring the
lattice at the source (rather than at the box entry point) keeps the DRR a
continuous function of the pose, which the intensity optimiser relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .geometry import Intrinsics, RigidTransform
from .imaging import AIR_HU, Image2D, Volume3D


@dataclass(frozen=True)
class AttenuationModel:
    mu_water: float = 0.02  # 1/mm
    hu_floor: float = AIR_HU

    def __post_init__(self):
        if self.mu_water <= 0:
            raise ValueError("mu_water must be positive")


@dataclass(frozen=True)
class RenderConfig:
    step_mm: Optional[float] = None  # None: half the smallest voxel spacing
    photons: float = 2000.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.step_mm is not None and self.step_mm <= 0:
            raise ValueError("step_mm must be positive")
        if self.photons <= 0:
            raise ValueError("photons must be positive")

    def step_for(self, v: Volume3D) -> float:
        return self.step_mm if self.step_mm is not None else 0.5 * min(v.spacing)


def hu_to_mu(hu, m: AttenuationModel = AttenuationModel()):
    """Linear attenuation (1/mm): ``max(0, mu_water * (1 + hu / 1000))``."""
    hu = np.asarray(hu, dtype=float)
    mu = np.maximum(0.0, m.mu_water * (1.0 + hu / 1000.0))
    mu = np.where(hu <= m.hu_floor, 0.0, mu)
    return mu if mu.ndim else float(mu)


@njit(fastmath=True, nogil=True, cache=True)
def _clip_axis(o, d, hi, t0, t1):
    if abs(d) < 1e-15:
        if o < 0.0 or o > hi:
            return 1.0, 0.0
        return t0, t1
    a = -o / d
    b = (hi - o) / d
    if a > b:
        a, b = b, a
    return max(t0, a), min(t1, b)


@njit(fastmath=True, nogil=True, cache=True)
def _render_kernel(mu, rinv, src, inv_sp, u0, v0, su, sv, sid, step, out):
    nz, ny, nx = mu.shape
    h, w = out.shape
    hx, hy, hz = nx - 1.0, ny - 1.0, nz - 1.0
    for j in range(h):
        for i in range(w):
            dx = (i - u0) * su
            dy = (j - v0) * sv
            dz = sid
            n = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= n
            dy /= n
            dz /= n
            # unit direction in the volume frame, then per-axis index rate
            ddx = (rinv[0, 0] * dx + rinv[0, 1] * dy + rinv[0, 2] * dz) * inv_sp[0]
            ddy = (rinv[1, 0] * dx + rinv[1, 1] * dy + rinv[1, 2] * dz) * inv_sp[1]
            ddz = (rinv[2, 0] * dx + rinv[2, 1] * dy + rinv[2, 2] * dz) * inv_sp[2]
            t0, t1 = 0.0, 1e30
            t0, t1 = _clip_axis(src[0], ddx, hx, t0, t1)
            t0, t1 = _clip_axis(src[1], ddy, hy, t0, t1)
            t0, t1 = _clip_axis(src[2], ddz, hz, t0, t1)
            if t1 <= t0:
                out[j, i] = 0.0
                continue
            k0 = math.ceil(t0 / step - 0.5)
            k1 = math.floor(t1 / step - 0.5)
            if k1 < k0:
                out[j, i] = 0.0
                continue
            t = (k0 + 0.5) * step
            x = src[0] + t * ddx
            y = src[1] + t * ddy
            z = src[2] + t * ddz
            sx = step * ddx
            sy = step * ddy
            sz = step * ddz
            acc = 0.0
            for _ in range(k1 - k0 + 1):
                ix = min(max(int(x), 0), nx - 2)
                iy = min(max(int(y), 0), ny - 2)
                iz = min(max(int(z), 0), nz - 2)
                fx = x - ix
                fy = y - iy
                fz = z - iz
                a0 = mu[iz, iy, ix]
                a1 = mu[iz, iy + 1, ix]
                a2 = mu[iz + 1, iy, ix]
                a3 = mu[iz + 1, iy + 1, ix]
                c00 = a0 + (mu[iz, iy, ix + 1] - a0) * fx
                c01 = a1 + (mu[iz, iy + 1, ix + 1] - a1) * fx
                c10 = a2 + (mu[iz + 1, iy, ix + 1] - a2) * fx
                c11 = a3 + (mu[iz + 1, iy + 1, ix + 1] - a3) * fx
                c0 = c00 + (c01 - c00) * fy
                c1 = c10 + (c11 - c10) * fy
                acc += c0 + (c1 - c0) * fz
                x += sx
                y += sy
                z += sz
            out[j, i] = acc * step


class DRRRenderer:
    """Reusable renderer holding the attenuation volume.

    The HU volume is converted to attenuation once and cropped to the box
    of non-zero attenuation (plus a one-voxel air margin), so rays only
    march where there is something to integrate. Instances are read-only
    after construction and may be shared between threads.
    """

    def __init__(self, volume: Volume3D, model: AttenuationModel = AttenuationModel()):
        self.model = model
        self.spacing = np.asarray(volume.spacing, dtype=float)
        mu = hu_to_mu(volume.voxels, model).astype(np.float32)
        nz_idx = np.nonzero(mu)
        if len(nz_idx[0]) == 0:
            self.mu = None
            self.origin = np.asarray(volume.origin, dtype=float)
            return
        lo = [max(int(a.min()) - 1, 0) for a in nz_idx]
        hi = [min(int(a.max()) + 2, s) for a, s in zip(nz_idx, mu.shape)]
        crop = mu[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        # the kernel needs two samples per axis for the +1 neighbour
        pad = [(0, max(0, 2 - s)) for s in crop.shape]
        self.mu = np.ascontiguousarray(np.pad(crop, pad))
        # voxel (z, y, x) index order -> world offset in (x, y, z)
        self.origin = np.asarray(volume.origin) + np.array([lo[2], lo[1], lo[0]]) * self.spacing

    def render(self, k: Intrinsics, extrinsic: RigidTransform, step_mm: float) -> np.ndarray:
        out = np.zeros((k.image_height, k.image_width), dtype=np.float64)
        if self.mu is None:
            return out
        rinv = np.ascontiguousarray(extrinsic.rotation.T)
        src_world = -rinv @ extrinsic.translation
        inv_sp = 1.0 / self.spacing
        src_idx = (src_world - self.origin) * inv_sp
        u0, v0 = k.principal_point
        _render_kernel(
            self.mu, rinv, src_idx, inv_sp, float(u0), float(v0),
            float(k.pixel_spacing_u), float(k.pixel_spacing_v), float(k.sid),
            float(step_mm), out,
        )
        return out


def render_drr(
    v: Volume3D,
    k: Intrinsics,
    extrinsic: RigidTransform,
    cfg: RenderConfig = RenderConfig(),
    m: AttenuationModel = AttenuationModel(),
) -> Image2D:
    """Line-integral DRR of ``v`` seen through ``k`` at pose ``extrinsic``
    (volume frame -> source frame). Rays that miss the volume read 0."""
    pixels = DRRRenderer(v, m).render(k, extrinsic, cfg.step_for(v))
    return Image2D(pixels, (k.pixel_spacing_u, k.pixel_spacing_v), {"domain": "line_integral"})


def simulate_fluoro(drr: Image2D, cfg: RenderConfig = RenderConfig()) -> Image2D:
    """Poisson photon noise applied in the intensity domain, re-logged.

    Expected counts are ``photons * exp(-L)``; the output pixel is
    ``-ln(max(n, 1) / photons)``. Deterministic for a given ``rng_seed``.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    expected = cfg.photons * np.exp(-drr.pixels)
    counts = rng.poisson(expected)
    noisy = -np.log(np.maximum(counts, 1) / cfg.photons)
    meta = dict(drr.meta)
    meta.update({"domain": "line_integral", "noise_domain": "intensity",
                 "photons": repr(float(cfg.photons))})
    return Image2D(noisy, drr.pixel_spacing, meta)
