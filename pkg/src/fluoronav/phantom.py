"""Synthetic ground truth: fiducial frame, stent phantom, C-arm scenes.

Frames and conventions used throughout the generator:

* The patient (CT) frame coincides with the fiducial mounting frame ``FG``
  at CT time; moving the patient afterwards is ``T_patient^FG``.
* x runs left-right, y head-foot, z from the X-ray source towards the
  detector at the AP view. The C-arm isocentre is the origin.
* The fiducial frame sits below the anatomy, nearer the source: a bottom
  layer of 10 and a top layer of 9 spheres in a square region.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .drr import DRRRenderer, RenderConfig, simulate_fluoro
from .errors import ParseError, PlacementFailure
from .evalmetrics import TargetSet, load_targets, save_targets
from .fiducials import LAYERS, FiducialModel, load_fiducial_model, save_fiducial_model, suppress_fiducials
from .geometry import (
    Intrinsics,
    RigidTransform,
    compose,
    invert,
    project_points,
    rot_x,
    rot_y,
    rot_z,
)
from .imaging import AIR_HU, Image2D, Volume3D, ensure_dir, load_image, load_volume, save_image, save_volume

log = logging.getLogger(__name__)

DEFAULT_SAD = 700.0
DEFAULT_SID = 1100.0
DETECTOR_PX = 1017
DETECTOR_SPACING = 0.29
MAX_PLACEMENT_ATTEMPTS = 10_000
FIDUCIAL_THRESHOLD_HU = 2200.0

Ellipsoid = Tuple[Tuple[float, float, float], Tuple[float, float, float]]


def _default_vertebrae() -> Tuple[Ellipsoid, ...]:
    # bodies grow caudally and the gaps are uneven; a periodic spine gives the
    # similarity metric false minima one vertebra away from the truth
    ys = (-80.0, -58.0, -33.0, -6.0, 19.0, 47.0, 78.0)
    half_x = (11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0)
    half_y = (7.0, 7.5, 8.0, 9.0, 9.5, 10.0, 11.0)
    xs = (-1.5, 0.5, 2.0, 0.0, -2.0, 1.0, 3.0)
    return tuple(((x, y, 45.0), (a, b, 9.0)) for x, y, a, b in zip(xs, ys, half_x, half_y))


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (192, 192, 128)  # (nx, ny, nz)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # fiducial frame
    n_top: int = 9
    n_bottom: int = 10
    bottom_layer_z: float = -58.0
    layer_separation: float = 20.0
    fiducial_region: float = 60.0
    fiducial_diameter: float = 4.0
    min_fiducial_spacing: float = 8.0
    fiducial_hu: float = 2500.0
    # anatomy
    water_hu: float = 0.0
    body_radius: float = 40.0
    body_center_xz: Tuple[float, float] = (0.0, 22.0)
    vertebra_hu: float = 800.0
    vertebrae: Tuple[Ellipsoid, ...] = field(default_factory=_default_vertebrae)
    sac_hu: float = 300.0
    sac: Optional[Ellipsoid] = ((15.0, 5.0, 12.0), (9.0, 14.0, 8.0))
    stent_hu: float = 2000.0
    stent_center_xz: Tuple[float, float] = (0.0, 12.0)
    stent_radius: float = 12.0
    stent_pitch: float = 40.0
    stent_length: float = 110.0
    stent_wire_radius: float = 1.0
    n_targets: int = 20
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("dims must be three sizes >= 2")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if self.layer_separation <= 0:
            raise ValueError("the two fiducial layers need distinct heights")
        half = (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0
        r = self.fiducial_diameter / 2.0
        zs = (self.bottom_layer_z, self.top_layer_z)
        if self.fiducial_region / 2 + r > min(half[0], half[1]) or min(zs) - r < -half[2] or max(zs) + r > half[2]:
            raise ValueError("fiducials do not fit inside the volume")

    @property
    def top_layer_z(self) -> float:
        return self.bottom_layer_z + self.layer_separation

    @property
    def origin(self) -> Tuple[float, float, float]:
        return tuple(-(np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0)


_SPEC_SCALARS = {f for f, v in PhantomSpec.__dataclass_fields__.items()
                 if v.type in ("int", "float")}


def load_phantom_spec(path) -> PhantomSpec:
    """``key = value`` lines; scalar fields plus ``dims``/``spacing`` triples."""
    kw = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", n)
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key == "dims":
                kw[key] = tuple(int(x) for x in val.split())
            elif key == "spacing":
                kw[key] = tuple(float(x) for x in val.split())
            elif key in _SPEC_SCALARS:
                ftype = PhantomSpec.__dataclass_fields__[key].type
                kw[key] = int(val) if ftype == "int" else float(val)
            else:
                raise ParseError(f"unknown phantom key {key!r}", n)
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
    try:
        return PhantomSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc)) from exc


# -- fiducial frame ------------------------------------------------------------------


def _sweep_clear(d_xy, sep, clearance, max_tilt_deg):
    """True if two spheres on different layers, offset by ``d_xy`` in plane,
    stay apart in every pure angular or pure orbital view up to the tilt."""
    # a few degrees of slack cover the perspective spread of the rays
    reach = sep * np.tan(np.radians(max_tilt_deg + 5.0)) + clearance
    ax, ay = abs(d_xy[0]), abs(d_xy[1])
    return not ((ax < reach and ay < clearance) or (ay < reach and ax < clearance))


def make_fiducial_model(spec: PhantomSpec = PhantomSpec()) -> FiducialModel:
    """Seeded two-layer constellation: top layer labels first, then bottom.

    Points are rejection-sampled uniformly in the square region with a
    minimum in-plane spacing, which makes the layout irregular (no symmetry
    that could confuse labelling). Pairs on different layers are also kept
    from overlapping in projection along the angular and orbital sweeps.
    """
    rng = np.random.default_rng(spec.seed)
    half = spec.fiducial_region / 2.0
    clearance = spec.fiducial_diameter + 2.0
    layers = [("top", spec.n_top, spec.top_layer_z), ("bottom", spec.n_bottom, spec.bottom_layer_z)]
    pts, tags = [], []
    attempts = 0
    for tag, count, z in layers:
        placed = 0
        while placed < count:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise PlacementFailure(
                    f"could not place {spec.n_top + spec.n_bottom} fiducials "
                    f"{spec.min_fiducial_spacing} mm apart in {spec.fiducial_region} mm"
                )
            p = np.array([*rng.uniform(-half, half, 2), z])
            ok = True
            for q, qtag in zip(pts, tags):
                d = p[:2] - q[:2]
                if np.hypot(*d) < spec.min_fiducial_spacing:
                    ok = False
                elif qtag != tag and not _sweep_clear(d, spec.layer_separation, clearance, 30.0):
                    ok = False
                if not ok:
                    break
            if not ok:
                continue
            pts.append(p)
            tags.append(tag)
            placed += 1
    return FiducialModel(np.arange(len(pts)), np.array(pts), tuple(tags))


FIDUCIAL_CONFIGS = ("19", "10", "6", "5-flat", "4-flat")


def _spread_order(points: np.ndarray) -> List[int]:
    """Farthest-point ordering in the layer plane, starting from the point
    farthest from the centroid; any prefix is a well spread subset."""
    xy = points[:, :2]
    order = [int(np.argmax(np.linalg.norm(xy - xy.mean(axis=0), axis=1)))]
    gap = np.linalg.norm(xy - xy[order[0]], axis=1)
    while len(order) < len(xy):
        nxt = int(np.argmax(gap))
        order.append(nxt)
        gap = np.minimum(gap, np.linalg.norm(xy - xy[nxt], axis=1))
    return order


def select_fiducials(model: FiducialModel, config: str) -> FiducialModel:
    """Named subsets used by the fiducial-count experiment.

    ``"N"`` keeps N fiducials split across both layers (top gets the
    smaller half); ``"N-flat"`` keeps N fiducials of the top layer only.
    Within a layer the most spread-out fiducials are kept, which keeps the
    pose estimate of small subsets well conditioned.
    """
    by_layer = {}
    for tag in LAYERS:
        idx = [i for i, t in enumerate(model.layers) if t == tag]
        by_layer[tag] = [int(model.labels[idx[j]]) for j in _spread_order(model.positions[idx])] if idx else []
    top, bottom = by_layer["top"], by_layer["bottom"]
    try:
        if config.endswith("-flat"):
            n = int(config[:-5])
            if n > len(top):
                raise ValueError
            return model.subset(sorted(top[:n]))
        n = int(config)
    except ValueError:
        raise ValueError(f"unknown fiducial configuration {config!r}") from None
    if n > len(model):
        raise ValueError(f"configuration {config!r} needs {n} fiducials")
    n_top = min(n // 2, len(top))
    n_bottom = n - n_top
    if n_bottom > len(bottom):
        n_bottom, n_top = len(bottom), n - len(bottom)
    return model.subset(sorted(top[:n_top] + bottom[:n_bottom]))


def pyramid_constellation(base: float = 60.0, height: float = 40.0) -> np.ndarray:
    """13 points on a square pyramid: 3x3 base ring without its centre,
    4 at mid-height, and the apex."""
    g = np.linspace(-base / 2, base / 2, 3)
    pts = [[x, y, 0.0] for x in g for y in g if (x, y) != (0.0, 0.0)]
    pts += [[sx * base / 4, sy * base / 4, height / 2] for sx in (-1, 1) for sy in (-1, 1)]
    pts.append([0.0, 0.0, height])
    return np.array(pts)


# tracker (magnetic field generator) frame expressed in the fiducial frame
DEFAULT_T_MT_FG = RigidTransform(rot_z(np.pi / 2) @ rot_x(np.pi), np.array([10.0, -20.0, -120.0]))


# -- volume rasterisation -------------------------------------------------------------


def _grid_box(spec: PhantomSpec, lo, hi):
    """Index ranges (per x, y, z) of voxel centres inside the world box."""
    origin, sp, dims = np.asarray(spec.origin), np.asarray(spec.spacing), np.asarray(spec.dims)
    i0 = np.clip(np.floor((np.asarray(lo) - origin) / sp).astype(int), 0, dims)
    i1 = np.clip(np.ceil((np.asarray(hi) - origin) / sp).astype(int) + 1, 0, dims)
    return i0, i1


def _paint(vox, spec, lo, hi, inside, hu, ss=3):
    """Blend ``hu`` into ``vox`` with the partial-volume fraction of the
    region ``inside(points) -> bool`` estimated on an ``ss^3`` sub-grid."""
    i0, i1 = _grid_box(spec, lo, hi)
    if np.any(i1 <= i0):
        return
    origin, sp = np.asarray(spec.origin), np.asarray(spec.spacing)
    axes = [origin[a] + sp[a] * np.arange(i0[a], i1[a]) for a in range(3)]
    offs = ((np.arange(ss) + 0.5) / ss - 0.5)
    frac = np.zeros((i1[2] - i0[2], i1[1] - i0[1], i1[0] - i0[0]))
    for ox in offs:
        for oy in offs:
            for oz in offs:
                z, y, x = np.meshgrid(axes[2] + oz * sp[2], axes[1] + oy * sp[1],
                                      axes[0] + ox * sp[0], indexing="ij")
                frac += inside(x, y, z)
    frac /= ss**3
    sl = (slice(i0[2], i1[2]), slice(i0[1], i1[1]), slice(i0[0], i1[0]))
    vox[sl] += (hu - vox[sl]) * frac


def _paint_ellipsoid(vox, spec, center, axes, hu, ss=3):
    c, a = np.asarray(center, float), np.asarray(axes, float)
    _paint(vox, spec, c - a - 1, c + a + 1,
           lambda x, y, z: ((x - c[0]) / a[0]) ** 2 + ((y - c[1]) / a[1]) ** 2 + ((z - c[2]) / a[2]) ** 2 <= 1.0,
           hu, ss)


def _paint_spheres(vox, spec, centers, radius, hu, ss=5):
    for c in np.atleast_2d(centers):
        _paint_ellipsoid(vox, spec, c, (radius,) * 3, hu, ss)


def _helix_points(spec: PhantomSpec, step: float = 0.1):
    """Dense samples of the two counter-wound stent wires."""
    n = int(np.ceil(spec.stent_length / step)) + 1
    y = np.linspace(-spec.stent_length / 2, spec.stent_length / 2, n)
    cx, cz = spec.stent_center_xz
    out = []
    for sgn in (1.0, -1.0):
        th = sgn * 2 * np.pi * y / spec.stent_pitch
        out.append(np.stack([cx + spec.stent_radius * np.cos(th), y, cz + spec.stent_radius * np.sin(th)], axis=1))
    return out


def _paint_stent(vox, spec):
    wires = np.vstack(_helix_points(spec))
    tree = cKDTree(wires)
    margin = spec.stent_wire_radius + 2.0
    i0, i1 = _grid_box(spec, wires.min(0) - margin, wires.max(0) + margin)
    origin, sp = np.asarray(spec.origin), np.asarray(spec.spacing)
    axes = [origin[a] + sp[a] * np.arange(i0[a], i1[a]) for a in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    d, _ = tree.query(np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1),
                      distance_upper_bound=margin)
    # linear partial-volume ramp one voxel wide around the wire surface
    frac = np.clip(spec.stent_wire_radius + 0.5 * min(spec.spacing) - d, 0.0, min(spec.spacing))
    frac = (frac / min(spec.spacing)).reshape(x.shape)
    sl = (slice(i0[2], i1[2]), slice(i0[1], i1[1]), slice(i0[0], i1[0]))
    vox[sl] += (spec.stent_hu - vox[sl]) * frac


def _paint_body(vox, spec, ss=4):
    origin, sp = np.asarray(spec.origin), np.asarray(spec.spacing)
    nx, ny, nz = spec.dims
    cx, cz = spec.body_center_xz
    x = origin[0] + sp[0] * np.arange(nx)
    z = origin[2] + sp[2] * np.arange(nz)
    offs = ((np.arange(ss) + 0.5) / ss - 0.5)
    frac = np.zeros((nz, nx))
    for ox in offs:
        for oz in offs:
            zz, xx = np.meshgrid(z + oz * sp[2], x + ox * sp[0], indexing="ij")
            frac += (xx - cx) ** 2 + (zz - cz) ** 2 <= spec.body_radius**2
    frac /= ss * ss
    vox += (spec.water_hu - vox) * frac[:, None, :]


@functools.lru_cache(maxsize=4)
def _anatomy(spec: PhantomSpec) -> Volume3D:
    nx, ny, nz = spec.dims
    vox = np.full((nz, ny, nx), AIR_HU, dtype=np.float64)
    _paint_body(vox, spec)
    for center, axes in spec.vertebrae:
        _paint_ellipsoid(vox, spec, center, axes, spec.vertebra_hu)
    if spec.sac is not None:
        _paint_ellipsoid(vox, spec, spec.sac[0], spec.sac[1], spec.sac_hu)
    _paint_stent(vox, spec)
    return Volume3D(vox.astype(np.float32), spec.spacing, spec.origin)


def anatomy_volume(spec: PhantomSpec = PhantomSpec()) -> Volume3D:
    """The phantom without the fiducial frame."""
    return _anatomy(spec)


def make_targets(spec: PhantomSpec = PhantomSpec()) -> TargetSet:
    """Seeded points on the stent wire centre-lines."""
    rng = np.random.default_rng([spec.seed, 1])
    cx, cz = spec.stent_center_xz
    pts = []
    for _ in range(spec.n_targets):
        sgn = 1.0 if rng.random() < 0.5 else -1.0
        y = rng.uniform(-0.45, 0.45) * spec.stent_length
        th = sgn * 2 * np.pi * y / spec.stent_pitch
        pts.append([cx + spec.stent_radius * np.cos(th), y, cz + spec.stent_radius * np.sin(th)])
    return TargetSet(np.array(pts))


def fiducial_volume(spec: PhantomSpec, model: FiducialModel) -> Volume3D:
    """Fiducial spheres alone on a crop of the phantom grid (frame FG)."""
    r = spec.fiducial_diameter / 2.0
    lo = model.positions.min(0) - r - 2
    hi = model.positions.max(0) + r + 2
    i0, i1 = _grid_box(spec, lo, hi)
    dims = tuple(int(v) for v in (i1 - i0))
    origin = np.asarray(spec.origin) + i0 * np.asarray(spec.spacing)
    vox = np.full((dims[2], dims[1], dims[0]), AIR_HU)
    # paint on the cropped grid, which shares the phantom's voxel lattice
    shim = _GridShim(dims, spec.spacing, tuple(origin))
    _paint_spheres(vox, shim, model.positions, r, spec.fiducial_hu)
    return Volume3D(vox.astype(np.float32), spec.spacing, tuple(origin))


@dataclass(frozen=True)
class _GridShim:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]


def make_phantom_volume(spec: PhantomSpec = PhantomSpec()) -> Tuple[Volume3D, TargetSet]:
    """CT of the phantom with the fiducial frame in place, plus targets."""
    vox = np.array(anatomy_volume(spec).voxels, dtype=np.float64)
    _paint_spheres(vox, spec, make_fiducial_model(spec).positions,
                   spec.fiducial_diameter / 2.0, spec.fiducial_hu)
    return Volume3D(vox.astype(np.float32), spec.spacing, spec.origin), make_targets(spec)


# -- C-arm geometry ----------------------------------------------------------------------


def default_intrinsics(sid: float = DEFAULT_SID) -> Intrinsics:
    return Intrinsics(sid, DETECTOR_SPACING, DETECTOR_SPACING, DETECTOR_PX, DETECTOR_PX)


def carm_rotation(angular_deg: float, orbital_deg: float) -> np.ndarray:
    """Gantry orientation: angular (LAO/RAO) about y, orbital (CRA/CAU) about x."""
    return rot_y(np.radians(angular_deg)) @ rot_x(np.radians(orbital_deg))


def carm_pose(angular_deg: float = 0.0, orbital_deg: float = 0.0, sad: float = DEFAULT_SAD,
              isocenter=(0.0, 0.0, 0.0)) -> RigidTransform:
    """``T_FG^source`` for a C-arm rotating about ``isocenter``.

    At 0/0 the source sits ``sad`` mm below the isocentre on -z, looking
    along +z with the detector axes aligned to x and y.
    """
    rc = carm_rotation(angular_deg, orbital_deg)
    src = np.asarray(isocenter, float) - sad * rc @ np.array([0.0, 0.0, 1.0])
    return RigidTransform(rc.T, -rc.T @ src)


def movement(dx: float = 0.0, dy: float = 0.0, dz: float = 0.0, rot_deg=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Patient displacement ``T_patient^FG`` (rotations about x, y, z in order)."""
    r = rot_z(np.radians(rot_deg[2])) @ rot_y(np.radians(rot_deg[1])) @ rot_x(np.radians(rot_deg[0]))
    return RigidTransform(r, np.array([dx, dy, dz], float))


# -- scenes -----------------------------------------------------------------------------------


@dataclass
class Scene:
    volume: Volume3D  # CT in the patient frame, fiducial frame included
    model: FiducialModel  # fiducials actually present at fluoro time
    targets: TargetSet
    k: Intrinsics
    fluoro: Image2D
    residual: Image2D
    blobs_gt: np.ndarray  # analytic in-field projections
    blob_labels: np.ndarray
    pose_gt: RigidTransform  # T_patient^source
    pose_fg_source: RigidTransform
    pose_patient_fg: RigidTransform
    t_mt_fg: RigidTransform = DEFAULT_T_MT_FG
    meta: Dict[str, str] = field(default_factory=dict)


def in_field(k: Intrinsics, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
    return (
        (uv[:, 0] >= margin) & (uv[:, 0] <= k.image_width - 1 - margin)
        & (uv[:, 1] >= margin) & (uv[:, 1] <= k.image_height - 1 - margin)
    )


def make_scene(
    spec: PhantomSpec,
    pose: RigidTransform,
    k: Intrinsics,
    photons: float = 2000.0,
    seed: int = 0,
    patient_fg: Optional[RigidTransform] = None,
    fiducials: str = "19",
    step_mm: Optional[float] = None,
) -> Scene:
    """Render a fluoroscopy frame and its fiducial residual.

    ``pose`` is the C-arm extrinsic ``T_FG^source``; ``patient_fg`` moves
    the patient relative to the fiducial frame after CT. The anatomy and
    the fiducial frame are rendered separately and summed in the log
    domain, which equals rendering them together; the residual image is
    the noiseless fiducial part.
    """
    patient_fg = patient_fg if patient_fg is not None else RigidTransform.identity()
    volume, targets = make_phantom_volume(spec)
    model = select_fiducials(make_fiducial_model(spec), fiducials)
    pose_gt = compose(pose, patient_fg)
    step = step_mm if step_mm is not None else 0.5 * min(spec.spacing)
    anat = _renderer(spec).render(k, pose_gt, step)
    fid = DRRRenderer(fiducial_volume(spec, model)).render(k, pose, step)
    spacing = (k.pixel_spacing_u, k.pixel_spacing_v)
    fluoro = simulate_fluoro(Image2D(anat + fid, spacing), RenderConfig(photons=photons, rng_seed=seed))
    residual = Image2D(fid, spacing, {"domain": "line_integral"})
    uv = project_points(k, pose, model.positions)
    keep = in_field(k, uv)
    return Scene(volume, model, targets, k, fluoro, residual, uv[keep], model.labels[keep],
                 pose_gt, pose, patient_fg,
                 meta={"photons": repr(float(photons)), "seed": str(seed), "fiducials": fiducials})


@functools.lru_cache(maxsize=4)
def _renderer(spec: PhantomSpec) -> DRRRenderer:
    return DRRRenderer(anatomy_volume(spec))


# -- scene directories ------------------------------------------------------------------------

SCENE_FILES = ("volume.vh", "volume.vraw", "fiducials.txt", "targets.txt",
               "fluoro.pgm", "residual.pgm", "truth.txt")


def _row(t: RigidTransform) -> str:
    return " ".join(repr(float(x)) for x in t.as_matrix()[:3].ravel())


def write_truth(path, scene: Scene):
    k = scene.k
    lines = [
        "# schema=1",
        "# 3x4 transforms row-major: r00 r01 r02 tx r10 ... tz",
        f"pose_patient_source {_row(scene.pose_gt)}",
        f"pose_fg_source {_row(scene.pose_fg_source)}",
        f"pose_patient_fg {_row(scene.pose_patient_fg)}",
        f"pose_mt_fg {_row(scene.t_mt_fg)}",
        f"intrinsics {float(k.sid)!r} {float(k.pixel_spacing_u)!r} {float(k.pixel_spacing_v)!r} "
        f"{k.image_width} {k.image_height} {float(k.principal_point[0])!r} {float(k.principal_point[1])!r}",
    ]
    lines += [f"{key} {val}" for key, val in sorted(scene.meta.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_truth(path) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            if key.startswith("pose_"):
                if len(vals) != 12:
                    raise ParseError(f"{key} needs 12 numbers", n)
                m = np.vstack([np.array(vals, float).reshape(3, 4), [0, 0, 0, 1]])
                out[key] = RigidTransform.from_matrix(m)
            elif key == "intrinsics":
                if len(vals) != 7:
                    raise ParseError("intrinsics needs sid su sv w h u0 v0", n)
                sid, su, sv = (float(v) for v in vals[:3])
                w, h = int(vals[3]), int(vals[4])
                out[key] = Intrinsics(sid, su, sv, w, h, (float(vals[5]), float(vals[6])))
            else:
                out[key] = " ".join(vals)
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
    for need in ("pose_patient_source", "pose_fg_source", "intrinsics"):
        if need not in out:
            raise ParseError(f"{path}: missing '{need}'")
    return out


def _data_window(px: np.ndarray) -> Tuple[float, float]:
    lo, hi = float(px.min()), float(px.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def write_scene(scene: Scene, out_dir) -> Path:
    d = ensure_dir(out_dir)
    save_volume(scene.volume, d / "volume")
    save_fiducial_model(scene.model, d / "fiducials.txt")
    save_targets(scene.targets, d / "targets.txt")
    # both images are log-domain floats; 16-bit windows keep them to ~1e-5
    save_image(scene.fluoro, d / "fluoro.pgm", window=_data_window(scene.fluoro.pixels))
    save_image(scene.residual, d / "residual.pgm", window=_data_window(scene.residual.pixels))
    write_truth(d / "truth.txt", scene)
    return d


@dataclass
class SceneFiles:
    """A scene read back from disk; images may be absent."""

    volume: Volume3D
    model: FiducialModel
    targets: TargetSet
    truth: Dict[str, object]
    fluoro: Optional[Image2D]
    residual: Optional[Image2D]

    @property
    def k(self) -> Intrinsics:
        return self.truth["intrinsics"]


def read_scene(scene_dir) -> SceneFiles:
    d = Path(scene_dir)

    def maybe(name):
        p = d / name
        return load_image(p) if p.exists() else None

    return SceneFiles(
        load_volume(d / "volume"),
        load_fiducial_model(d / "fiducials.txt"),
        load_targets(d / "targets.txt"),
        read_truth(d / "truth.txt"),
        maybe("fluoro.pgm"),
        maybe("residual.pgm"),
    )
