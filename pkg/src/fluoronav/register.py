"""Intensity-based 2D/3D registration and the three initialisation modes.

The objective is ``1 - grad_ncc(fluoro, DRR(pose))``. Registration runs on
two detector resolutions: a coarse level (block factor 8) searched globally
by CMA-ES, then a fine level (factor 4) refined by the quadratic-model
trust-region method. Each level optimises six normalised parameters in
``[-1, 1]``: a rotation vector and a shift, scaled by the coarse bounds
and applied in the source frame about the volume centre, on top of the
initial pose. The fine level searches a smaller box around the coarse
optimum, clipped to the coarse box, so the whole search stays within the
configured bounds around the initial pose.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .drr import DRRRenderer
from .errors import DimensionMismatch, InvalidConfig, ModeInputMissing, ParseError, RenderFailure
from .fiducials import CorrespondenceSet, FiducialModel, detect_blobs_2d, match_2d_3d, suppress_fiducials
from .geometry import (
    Intrinsics,
    PoseParams,
    RigidTransform,
    compose,
    downsample_intrinsics,
    pose_to_transform,
)
from .imaging import Image2D, Volume3D, downsample_image, save_image
from .optim import OptimizerConfig, OptimizerTrace, bobyqa_minimize, cmaes_minimize
from .pose import pnp_pose

log = logging.getLogger(__name__)


# -- similarity ------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityConfig:
    patch_radius: int = 5
    patch_stride: Optional[int] = None  # None: equal to the radius
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.patch_stride is not None and self.patch_stride < 1:
            raise ValueError("patch_stride must be >= 1")

    @property
    def stride(self) -> int:
        return self.patch_stride if self.patch_stride is not None else self.patch_radius


def sobel_gradients(px: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    px = np.asarray(px, dtype=float)
    return ndimage.sobel(px, axis=1, mode="nearest"), ndimage.sobel(px, axis=0, mode="nearest")


def _patches(g: np.ndarray, cfg: SimilarityConfig):
    """Centred patch values and their variances on the stride grid."""
    k = 2 * cfg.patch_radius + 1
    if g.shape[0] < k or g.shape[1] < k:
        return np.zeros((0, k * k)), np.zeros(0)
    win = sliding_window_view(g, (k, k))[:: cfg.stride, :: cfg.stride]
    win = win.reshape(-1, k * k)
    centred = win - win.mean(axis=1, keepdims=True)
    return centred, np.mean(centred**2, axis=1)


class GradNCC:
    """Patch-wise gradient NCC against a fixed image.

    The fixed image's gradient patches are prepared once; calling the
    object with a moving image returns the mean NCC over patches and both
    gradient channels. A patch is uninformative, and left out, when both
    images are flat there (variance below epsilon); when only one side is
    flat it counts with correlation 0.
    """

    def __init__(self, fixed: np.ndarray, cfg: SimilarityConfig = SimilarityConfig()):
        self.cfg = cfg
        self.shape = np.shape(fixed)
        self._fixed = [_patches(g, cfg) for g in sobel_gradients(fixed)]

    def __call__(self, moving: np.ndarray) -> float:
        if np.shape(moving) != self.shape:
            raise DimensionMismatch(f"image shapes differ: {self.shape} vs {np.shape(moving)}")
        eps = self.cfg.epsilon
        total, count = 0.0, 0
        for (fa, va), g in zip(self._fixed, sobel_gradients(moving)):
            fb, vb = _patches(g, self.cfg)
            informative = (va >= eps) | (vb >= eps)
            both = (va >= eps) & (vb >= eps)
            cov = np.mean(fa[both] * fb[both], axis=1)
            total += float(np.sum(cov / np.sqrt(va[both] * vb[both])))
            count += int(np.count_nonzero(informative))
        return total / count if count else 0.0


def grad_ncc(a: Image2D, b: Image2D, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    """Patch-based gradient normalised cross-correlation in [-1, 1]."""
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatch(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    return GradNCC(a.pixels, cfg)(b.pixels)


# -- configuration and results ---------------------------------------------------------


class Mode(str, enum.Enum):
    NAIVE = "naive"
    POSE_ONLY = "poseonly"
    FULL = "full"


@dataclass(frozen=True)
class LevelConfig:
    factor: int
    budget: int
    rot_bound_deg: float
    trans_bound_mm: float
    step_mm: float  # ray-marching step for this level's DRRs


@dataclass(frozen=True)
class RegistrationConfig:
    """Two-level registration settings.

    The coarse search uses CMA-ES with initial step ``coarse_sigma`` and the
    fine search starts with trust radius ``fine_rho_begin``, both in
    normalised units (fractions of the level's half-ranges).
    """

    mode: Mode = Mode.FULL
    coarse: LevelConfig = LevelConfig(8, 3000, 15.0, 50.0, 2.0)
    fine: LevelConfig = LevelConfig(4, 1000, 5.0, 15.0, 1.0)
    coarse_sigma: float = 0.25
    # a wider population than the n-based default keeps the coarse search from
    # settling on the plateau around a thin-structure basin
    coarse_population: Optional[int] = 20
    coarse_stall_evals: Optional[int] = 600
    coarse_f_tol: float = 1e-4
    fine_rho_begin: float = 0.1
    fine_rho_end: float = 1e-3
    seed: int = 0
    similarity: SimilarityConfig = SimilarityConfig()

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for lvl in (self.coarse, self.fine):
            if lvl.factor < 1 or lvl.budget <= 0 or lvl.step_mm <= 0:
                raise ValueError("level factors, budgets and steps must be positive")
            if lvl.rot_bound_deg <= 0 or lvl.trans_bound_mm <= 0:
                raise ValueError("search bounds must be positive")


@dataclass
class RegistrationResult:
    extrinsic: RigidTransform  # T_patient^source
    similarity_final: float
    level_traces: Tuple[OptimizerTrace, ...]
    mode: Mode
    init_pose: RigidTransform
    runtime_s: float = 0.0
    correspondences: Optional[CorrespondenceSet] = None
    # fine-level objective at the coarse result, the fine search's start
    fine_start_f: Optional[float] = None

    @property
    def evals(self) -> Tuple[int, ...]:
        return tuple(t.evals_used for t in self.level_traces)


_LEVEL_KEYS = ("factor", "budget", "rot_bound_deg", "trans_bound_mm", "step_mm")
_TOP_KEYS = {"coarse_sigma": float, "coarse_population": int, "coarse_stall_evals": int,
             "coarse_f_tol": float, "fine_rho_begin": float, "fine_rho_end": float, "seed": int,
             "mode": str}
_SIM_KEYS = {"patch_radius": int, "patch_stride": int, "epsilon": float}


def load_registration_config(path, base: RegistrationConfig = RegistrationConfig()) -> RegistrationConfig:
    """Overrides from ``key = value`` lines.

    Level fields are prefixed ``coarse_`` or ``fine_`` (``coarse_budget``,
    ``fine_step_mm``, ...); similarity fields use their own names.
    """
    top, sim = {}, {}
    levels = {"coarse": {}, "fine": {}}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", n)
        key, val = (x.strip() for x in line.split("=", 1))
        try:
            lvl, _, rest = key.partition("_")
            if lvl in levels and rest in _LEVEL_KEYS:
                cast = int if rest in ("factor", "budget") else float
                levels[lvl][rest] = cast(val)
            elif key in _TOP_KEYS:
                top[key] = None if val.lower() == "none" else _TOP_KEYS[key](val)
            elif key in _SIM_KEYS:
                sim[key] = _SIM_KEYS[key](val)
            else:
                raise ParseError(f"unknown registration key {key!r}", n)
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
    try:
        return replace(base, coarse=replace(base.coarse, **levels["coarse"]),
                       fine=replace(base.fine, **levels["fine"]),
                       similarity=replace(base.similarity, **sim), **top)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc


def level_scale(level: LevelConfig) -> np.ndarray:
    """Half-ranges of the six pose parameters (radians, mm)."""
    return np.array([np.radians(level.rot_bound_deg)] * 3 + [level.trans_bound_mm] * 3)


class LevelObjective:
    """``1 - grad_ncc`` at one pyramid level as a function of normalised
    pose parameters."""

    def __init__(self, renderer: DRRRenderer, fluoro: Image2D, k: Intrinsics, start: RigidTransform,
                 center: np.ndarray, level: LevelConfig, sim: SimilarityConfig,
                 scale: Optional[np.ndarray] = None):
        self.renderer = renderer
        self.k = downsample_intrinsics(k, level.factor)
        fixed = downsample_image(fluoro, level.factor).pixels
        if fixed.shape != self.k.shape:
            raise DimensionMismatch(f"fluoro {fluoro.pixels.shape} does not match intrinsics {k.shape}")
        self.metric = GradNCC(fixed, sim)
        self.start = start
        self.center = start.rotation @ center + start.translation
        self.scale = level_scale(level) if scale is None else np.asarray(scale, dtype=float)
        self.step = level.step_mm

    def transform(self, x) -> RigidTransform:
        q = np.asarray(x, dtype=float) * self.scale
        return compose(pose_to_transform(PoseParams(q[:3], q[3:], self.center)), self.start)

    def render(self, t: RigidTransform) -> np.ndarray:
        img = self.renderer.render(self.k, t, self.step)
        if not np.all(np.isfinite(img)):
            raise RenderFailure("non-finite DRR pixels")
        return img

    def __call__(self, x) -> float:
        return 1.0 - self.metric(self.render(self.transform(x)))


def register_intensity(
    v: Volume3D,
    fluoro: Image2D,
    k: Intrinsics,
    init: RigidTransform,
    cfg: RegistrationConfig = RegistrationConfig(),
    renderer: Optional[DRRRenderer] = None,
) -> RegistrationResult:
    """Refine ``init`` (patient -> source) so DRRs of ``v`` match ``fluoro``."""
    t0 = time.perf_counter()
    if fluoro.pixels.shape != k.shape:
        raise DimensionMismatch(f"fluoro {fluoro.pixels.shape} vs intrinsics {k.shape}")
    renderer = renderer if renderer is not None else DRRRenderer(v)
    center = v.center()
    bounds = [[-1.0, 1.0]] * 6

    coarse = LevelObjective(renderer, fluoro, k, init, center, cfg.coarse, cfg.similarity)
    tr1 = cmaes_minimize(coarse, OptimizerConfig(
        max_evals=cfg.coarse.budget, x0=np.zeros(6), bounds=bounds, sigma0=cfg.coarse_sigma,
        population=cfg.coarse_population, seed=cfg.seed, stall_evals=cfg.coarse_stall_evals,
        f_tol=cfg.coarse_f_tol))

    # fine search in the same parameters, boxed around the coarse optimum
    ratio = level_scale(cfg.fine) / coarse.scale
    x1 = tr1.best_x
    fine_bounds = np.stack([np.maximum(x1 - ratio, -1.0), np.minimum(x1 + ratio, 1.0)], axis=1)
    fine = LevelObjective(renderer, fluoro, k, init, center, cfg.fine, cfg.similarity,
                          scale=coarse.scale)
    tr2 = bobyqa_minimize(fine, OptimizerConfig(
        max_evals=cfg.fine.budget, x0=x1, bounds=fine_bounds,
        rho_begin=cfg.fine_rho_begin * float(np.min(ratio)),
        rho_end=cfg.fine_rho_end * float(np.min(ratio)), seed=cfg.seed))
    result = fine.transform(tr2.best_x)
    runtime = time.perf_counter() - t0
    log.info("registration: coarse f=%.4f (%d evals), fine f=%.4f (%d evals), %.1f s",
             tr1.best_f, tr1.evals_used, tr2.best_f, tr2.evals_used, runtime)
    return RegistrationResult(result, tr2.best_f, (tr1, tr2), cfg.mode, init, runtime,
                              fine_start_f=tr2.history[0][1])


# -- modes -------------------------------------------------------------------------------


@dataclass
class RegistrationInputs:
    """Everything a mode may need for one fluoroscopy frame.

    ``prior`` is the believed patient placement ``T_patient^FG`` used with
    the PnP pose in Full mode; ``correction`` is the once-computed
    ``T_patient^FG`` applied by PoseOnly mode; ``nominal_pose`` is the
    canonical AP ``T_patient^source`` Naive mode starts from.
    """

    volume: Volume3D
    fluoro: Image2D
    k: Intrinsics
    model: Optional[FiducialModel] = None
    residual: Optional[Image2D] = None
    blobs: Optional[np.ndarray] = None
    prior: RigidTransform = field(default_factory=RigidTransform.identity)
    correction: Optional[RigidTransform] = None
    nominal_pose: Optional[RigidTransform] = None
    _renderer: Optional[DRRRenderer] = field(default=None, repr=False)
    _anatomy: Optional[Volume3D] = field(default=None, repr=False)

    def anatomy(self) -> Volume3D:
        if self._anatomy is None:
            self._anatomy = suppress_fiducials(self.volume)
        return self._anatomy

    def renderer(self) -> DRRRenderer:
        if self._renderer is None:
            self._renderer = DRRRenderer(self.anatomy())
        return self._renderer

    def target_image(self) -> Image2D:
        """Fluoro with the fiducial frame removed (log-domain subtraction)."""
        if self.residual is None:
            return self.fluoro
        if self.residual.pixels.shape != self.fluoro.pixels.shape:
            raise DimensionMismatch("residual and fluoro sizes differ")
        return Image2D(self.fluoro.pixels - self.residual.pixels, self.fluoro.pixel_spacing,
                       dict(self.fluoro.meta))


def estimate_carm_pose(inputs: RegistrationInputs, seed: int = 0) -> Tuple[RigidTransform, CorrespondenceSet]:
    """``T_FG^source`` by fiducial detection, matching and PnP."""
    if inputs.model is None:
        raise ModeInputMissing("fiducial model required for PnP initialisation")
    blobs = inputs.blobs
    if blobs is None:
        if inputs.residual is None:
            raise ModeInputMissing("residual image or fiducial blobs required for PnP initialisation")
        blobs = detect_blobs_2d(inputs.residual)
    c = match_2d_3d(blobs, inputs.model, inputs.k, seed=seed)
    return pnp_pose(c, inputs.k), c


def run_mode(inputs: RegistrationInputs, cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    mode = cfg.mode
    if mode == Mode.NAIVE:
        if inputs.nominal_pose is None:
            raise ModeInputMissing("naive mode needs the nominal AP pose")
        return register_intensity(inputs.anatomy(), inputs.target_image(), inputs.k,
                                  inputs.nominal_pose, cfg, inputs.renderer())
    if mode == Mode.POSE_ONLY:
        if inputs.correction is None:
            raise ModeInputMissing("pose-only mode needs the stored T_patient^FG correction")
        t0 = time.perf_counter()
        carm, c = estimate_carm_pose(inputs, cfg.seed)
        pose = compose(carm, inputs.correction)
        fine = LevelObjective(inputs.renderer(), inputs.target_image(), inputs.k, pose,
                              inputs.anatomy().center(), cfg.fine, cfg.similarity)
        return RegistrationResult(pose, fine(np.zeros(6)), (), mode, pose,
                                  time.perf_counter() - t0, c)
    carm, c = estimate_carm_pose(inputs, cfg.seed)
    init = compose(carm, inputs.prior)
    res = register_intensity(inputs.anatomy(), inputs.target_image(), inputs.k, init, cfg,
                             inputs.renderer())
    res.correspondences = c
    return res


# -- reports -------------------------------------------------------------------------------


def _num(x: float) -> float:
    return float(f"{x:.6g}")


def _matrix_rows(t: RigidTransform):
    return [_num(v) for v in t.as_matrix()[:3].ravel()]


def write_report(result: RegistrationResult, path, extra: Optional[dict] = None, stamp: bool = True):
    """Key/value report as JSON, preceded by one timestamp comment line."""
    body = {
        "mode": result.mode.value,
        "init_pose": _matrix_rows(result.init_pose),
        "final_pose": _matrix_rows(result.extrinsic),
        "similarity_final": _num(result.similarity_final),
        "evals": list(result.evals),
        "terminations": [t.termination.value for t in result.level_traces],
        "runtime_s": _num(result.runtime_s),
    }
    if result.correspondences is not None:
        body["matched_fiducials"] = int(len(result.correspondences))
    if extra:
        body.update(extra)
    header = f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}\n" if stamp else ""
    Path(path).write_text(header + json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return json.loads("\n".join(lines))


def overlay_image(fluoro: Image2D, drr: np.ndarray, edge_quantile: float = 0.95) -> Image2D:
    """Fluoro scaled to 80% grey with the DRR's strongest edges drawn white."""
    px = fluoro.pixels
    lo, hi = float(px.min()), float(px.max())
    base = (px - lo) / (hi - lo) * 0.8 if hi > lo else np.zeros_like(px)
    gx, gy = sobel_gradients(drr)
    mag = np.hypot(gx, gy)
    nz = mag[mag > 0]
    if nz.size:
        base = np.where(mag >= np.quantile(nz, edge_quantile), 1.0, base)
    return Image2D(base, fluoro.pixel_spacing, {"content": "overlay"})


def save_overlay(inputs: RegistrationInputs, result: RegistrationResult, path, step_mm: float = 1.0):
    drr = inputs.renderer().render(inputs.k, result.extrinsic, step_mm)
    save_image(overlay_image(inputs.fluoro, drr), path, window=(0.0, 1.0))
