"""Experiment manifests, case execution and sweep summaries.

A manifest has one case per line, ``case_id key=value ...``. Values with
commas expand into one case per item, ``a..b`` into an integer range, and
``sweep=key:start:stop:step`` into an inclusive numeric range. The expanded
id is ``case_id@key=value@...`` in line order, and the original ``case_id``
names the sweep group the case is summarised under.

Case keys:

* scene generation -- ``angular``, ``orbital`` (deg), ``dx``, ``dy``, ``dz``
  (mm patient movement), ``fiducials`` (one of the fiducial configurations),
  ``photons``, ``seed``, ``phantom`` (spec file);
* ``random_move=M`` / ``random_angle=A`` draw dx, dy uniformly in ±M mm
  and the angular position in ±A deg from the case seed;
* ``scene=DIR`` registers a stored scene instead of generating one;
* ``mode``, ``coarse_budget``, ``fine_budget``, ``reg_seed``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegeneracyWarning,
    DegenerateConfiguration,
    InsufficientPoints,
    MatchFailed,
    NoConvergence,
    ParseError,
)
from .evalmetrics import CaseResult, write_results_csv
from .geometry import RigidTransform, compose, invert
from .phantom import (
    PhantomSpec,
    carm_pose,
    default_intrinsics,
    load_phantom_spec,
    make_scene,
    movement,
    read_scene,
)
from .register import (
    Mode,
    RegistrationConfig,
    RegistrationInputs,
    estimate_carm_pose,
    run_mode,
    write_report,
)

log = logging.getLogger(__name__)

NUMERIC_KEYS = {"angular", "orbital", "dx", "dy", "dz", "photons", "random_move", "random_angle"}
INT_KEYS = {"seed", "coarse_budget", "fine_budget", "reg_seed"}
TEXT_KEYS = {"mode", "fiducials", "scene", "phantom"}
KNOWN_KEYS = NUMERIC_KEYS | INT_KEYS | TEXT_KEYS
DETAILS_HEADER = ["case_id", "group", "mode", "degenerate", "error", "runtime_s", "evals"]


@dataclass(frozen=True)
class Case:
    case_id: str
    group: str
    params: Dict[str, str] = field(default_factory=dict)

    def get(self, key, default=None):
        v = self.params.get(key)
        if v is None:
            return default
        if key in INT_KEYS:
            return int(v)
        if key in NUMERIC_KEYS:
            return float(v)
        return v

    @property
    def mode(self) -> Mode:
        return Mode(self.params.get("mode", "full"))


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else f"{x:.6g}"


def _expand_value(key: str, raw: str, n: int) -> List[str]:
    if "," in raw:
        return [v for v in raw.split(",") if v]
    if ".." in raw and key in INT_KEYS:
        lo, hi = raw.split("..", 1)
        try:
            return [str(i) for i in range(int(lo), int(hi) + 1)]
        except ValueError as exc:
            raise ParseError(f"bad range {raw!r}", n) from exc
    return [raw]


def _expand_sweep(raw: str, n: int) -> Tuple[str, List[str]]:
    parts = raw.split(":")
    if len(parts) != 4:
        raise ParseError("sweep must be key:start:stop:step", n)
    key = parts[0]
    try:
        start, stop, step = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise ParseError(f"bad sweep {raw!r}", n) from exc
    if step <= 0 or stop < start:
        raise ParseError("sweep needs step > 0 and stop >= start", n)
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return key, [_fmt(start + i * step) for i in range(count)]


def parse_manifest(text: str) -> List[Case]:
    cases: List[Case] = []
    seen = set()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cid, *fields = line.split()
        axes: List[Tuple[str, List[str]]] = []
        for f in fields:
            if "=" not in f:
                raise ParseError(f"expected key=value, got {f!r}", n)
            key, raw = f.split("=", 1)
            if key == "sweep":
                key, values = _expand_sweep(raw, n)
            else:
                values = _expand_value(key, raw, n)
            if key not in KNOWN_KEYS:
                raise ParseError(f"unknown key {key!r}", n)
            if key == "mode":
                for v in values:
                    try:
                        Mode(v)
                    except ValueError as exc:
                        raise ParseError(f"unknown mode {v!r}", n) from exc
            axes.append((key, values))
        for combo in itertools.product(*[vals for _, vals in axes]):
            params = {k: v for (k, _), v in zip(axes, combo)}
            varying = [f"{k}={v}" for (k, vals), v in zip(axes, combo) if len(vals) > 1]
            full_id = "@".join([cid] + varying)
            if full_id in seen:
                raise ParseError(f"duplicate case id {full_id!r}", n)
            seen.add(full_id)
            cases.append(Case(full_id, cid, params))
    return cases


def load_manifest(path) -> List[Case]:
    return parse_manifest(Path(path).read_text())


# -- running ---------------------------------------------------------------------------------


@dataclass
class CaseOutcome:
    result: CaseResult
    group: str
    params: Dict[str, str]
    degenerate: bool = False
    error: str = ""
    runtime_s: float = 0.0
    evals: Tuple[int, ...] = ()

    def details_row(self) -> List[str]:
        return [self.result.case_id, self.group, self.result.mode, "true" if self.degenerate else "false",
                self.error, f"{self.runtime_s:.6g}", " ".join(str(e) for e in self.evals)]


def registration_config(case: Case, base: Optional[RegistrationConfig] = None) -> RegistrationConfig:
    base = base if base is not None else RegistrationConfig()
    coarse, fine = base.coarse, base.fine
    if case.get("coarse_budget") is not None:
        coarse = replace(coarse, budget=case.get("coarse_budget"))
    if case.get("fine_budget") is not None:
        fine = replace(fine, budget=case.get("fine_budget"))
    return replace(base, mode=case.mode, coarse=coarse, fine=fine,
                   seed=case.get("reg_seed", base.seed))


def _phantom(case: Case) -> PhantomSpec:
    path = case.get("phantom")
    return load_phantom_spec(path) if path else PhantomSpec()


def scene_geometry(case: Case) -> Tuple[float, float, RigidTransform]:
    """Angular/orbital position and patient movement, drawing random ones from the seed."""
    seed = case.get("seed", 0)
    rng = np.random.default_rng([seed, 7919])
    angular = case.get("angular", 0.0)
    if case.get("random_angle") is not None:
        a = case.get("random_angle")
        angular = float(rng.uniform(-a, a))
    dx, dy = case.get("dx", 0.0), case.get("dy", 0.0)
    if case.get("random_move") is not None:
        m = case.get("random_move")
        dx, dy = (float(v) for v in rng.uniform(-m, m, 2))
    return angular, case.get("orbital", 0.0), movement(dx, dy, case.get("dz", 0.0))


def build_inputs(case: Case, correction: Optional[RigidTransform] = None):
    """Registration inputs plus ground truth ``(pose_gt, targets, k)`` for a case."""
    nominal = carm_pose(0.0, 0.0)
    if case.get("scene"):
        s = read_scene(case.get("scene"))
        inputs = RegistrationInputs(s.volume, s.fluoro, s.k, s.model, s.residual,
                                    correction=correction, nominal_pose=nominal)
        return inputs, s.truth["pose_patient_source"], s.targets, s.k
    spec = _phantom(case)
    k = default_intrinsics()
    angular, orbital, moved = scene_geometry(case)
    sc = make_scene(spec, carm_pose(angular, orbital), k, photons=case.get("photons", 2000.0),
                    seed=case.get("seed", 0), patient_fg=moved,
                    fiducials=case.get("fiducials", "19"))
    inputs = RegistrationInputs(sc.volume, sc.fluoro, k, sc.model, sc.residual,
                                correction=correction, nominal_pose=nominal)
    return inputs, sc.pose_gt, sc.targets, k


def ap_correction(spec: PhantomSpec = PhantomSpec(), photons: float = 2000.0, seed: int = 0,
                  cfg: RegistrationConfig = RegistrationConfig()) -> RigidTransform:
    """``T_patient^FG`` from one Full registration at AP, as stored for PoseOnly."""
    k = default_intrinsics()
    sc = make_scene(spec, carm_pose(0.0, 0.0), k, photons=photons, seed=seed)
    inputs = RegistrationInputs(sc.volume, sc.fluoro, k, sc.model, sc.residual)
    res = run_mode(inputs, replace(cfg, mode=Mode.FULL))
    carm, _ = estimate_carm_pose(inputs, cfg.seed)
    return compose(invert(carm), res.extrinsic)


RECOVERABLE = (MatchFailed, NoConvergence, DegenerateConfiguration, InsufficientPoints)


def run_case(case: Case, correction: Optional[RigidTransform] = None,
             out_dir: Optional[Path] = None, base_cfg: Optional[RegistrationConfig] = None) -> CaseOutcome:
    """Run one case; estimation failures become failed rows rather than exceptions."""
    t0 = time.perf_counter()
    mode = case.mode.value
    inputs, pose_gt, targets, k = build_inputs(case, correction)
    cfg = registration_config(case, base_cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegeneracyWarning)
        try:
            res = run_mode(inputs, cfg)
        except RECOVERABLE as exc:
            degenerate = any(issubclass(w.category, DegeneracyWarning) for w in caught)
            log.info("%s failed: %s", case.case_id, exc)
            return CaseOutcome(CaseResult.failed(case.case_id, mode), case.group, dict(case.params),
                               degenerate or isinstance(exc, DegenerateConfiguration),
                               type(exc).__name__, time.perf_counter() - t0)
    degenerate = any(issubclass(w.category, DegeneracyWarning) for w in caught)
    result = CaseResult.evaluate(case.case_id, mode, k, pose_gt, res.extrinsic, targets)
    if out_dir is not None:
        d = Path(out_dir) / "cases" / case.case_id.replace("/", "_")
        d.mkdir(parents=True, exist_ok=True)
        write_report(res, d / "report.json", extra={
            "case_id": case.case_id, "mpd": float(f"{result.mpd:.6g}"), "success": bool(result.success)})
    return CaseOutcome(result, case.group, dict(case.params), degenerate, "",
                       time.perf_counter() - t0, tuple(res.evals))


def _run_packed(args):
    case, corr, out_dir, cfg = args
    correction = None if corr is None else RigidTransform.from_matrix(np.asarray(corr))
    return run_case(case, correction, out_dir, cfg)


def run_cases(cases: Sequence[Case], threads: int = 1, out_dir: Optional[Path] = None,
              correction: Optional[RigidTransform] = None,
              base_cfg: Optional[RegistrationConfig] = None) -> List[CaseOutcome]:
    """Run cases across a bounded worker pool; results come back sorted by case id."""
    needs_corr = any(c.mode == Mode.POSE_ONLY for c in cases)
    if needs_corr and correction is None:
        correction = ap_correction(cfg=base_cfg or RegistrationConfig())
    corr = None if correction is None else correction.as_matrix()[:3].tolist()
    jobs = [(c, corr if c.mode == Mode.POSE_ONLY else None, out_dir, base_cfg) for c in cases]
    if threads <= 1 or len(jobs) <= 1:
        outs = [_run_packed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(_run_packed, jobs))
    return sorted(outs, key=lambda o: o.result.case_id)


# -- summaries ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSummary:
    group: str
    mode: str
    n: int
    mpd_mean: float
    mpd_std: float
    mtre_mean: float
    success_rate: float

    def row(self) -> List[str]:
        return [self.group, self.mode, str(self.n), f"{self.mpd_mean:.6g}", f"{self.mpd_std:.6g}",
                f"{self.mtre_mean:.6g}", f"{self.success_rate:.6g}"]


SUMMARY_HEADER = ["group", "mode", "n", "mpd_mean", "mpd_std", "mtre_mean", "success_rate"]


def summarize(outcomes: Sequence[CaseOutcome]) -> List[SweepSummary]:
    """Mean ± std mPD over finished cases and success rate over all cases, per group and mode."""
    groups: Dict[Tuple[str, str], List[CaseOutcome]] = {}
    for o in outcomes:
        groups.setdefault((o.group, o.result.mode), []).append(o)
    out = []
    for (g, m), os_ in sorted(groups.items()):
        mpds = np.array([o.result.mpd for o in os_])
        ok = mpds[np.isfinite(mpds)]
        mtres = np.array([o.result.mtre for o in os_])
        mtres = mtres[np.isfinite(mtres)]
        nan = float("nan")
        out.append(SweepSummary(
            g, m, len(os_),
            float(ok.mean()) if ok.size else nan,
            float(ok.std()) if ok.size else nan,
            float(mtres.mean()) if mtres.size else nan,
            float(np.mean([o.result.success for o in os_])),
        ))
    return out


def format_table(summaries: Sequence[SweepSummary]) -> str:
    """Groups as rows, modes as columns, cells ``mean ± std (SR%)``."""
    modes = [m.value for m in Mode if any(s.mode == m.value for s in summaries)]
    groups = sorted({s.group for s in summaries})
    cell = {(s.group, s.mode): f"{s.mpd_mean:.3g} ± {s.mpd_std:.2g} ({100 * s.success_rate:.0f}%)"
            for s in summaries}
    rows = [["mPD mm (SR)"] + modes] + [[g] + [cell.get((g, m), "-") for m in modes] for g in groups]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def write_details_csv(outcomes: Sequence[CaseOutcome], path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETAILS_HEADER)
        for o in outcomes:
            w.writerow(o.details_row())


def write_summary_csv(summaries: Sequence[SweepSummary], path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow(s.row())


def sweep_axis(outcomes: Sequence[CaseOutcome]) -> Optional[str]:
    """The numeric scene key that varies within a group, if there is exactly one."""
    varying = []
    for key in ("angular", "orbital", "dx", "dy", "dz"):
        vals = {o.params.get(key) for o in outcomes}
        if len(vals) > 1:
            varying.append(key)
    return varying[0] if len(varying) == 1 else None


def write_sweep_outputs(outcomes: Sequence[CaseOutcome], out_dir) -> Dict[str, Path]:
    """Results, per-case details, summary table and one figure per numeric sweep."""
    from .plotting import plot_sweep

    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"results": d / "results.csv", "details": d / "details.csv",
             "summary": d / "summary.csv", "table": d / "summary.txt"}
    write_results_csv([o.result for o in outcomes], paths["results"])
    write_details_csv(outcomes, paths["details"])
    summaries = summarize(outcomes)
    write_summary_csv(summaries, paths["summary"])
    paths["table"].write_text(format_table(summaries) if summaries else "")
    by_group: Dict[str, List[CaseOutcome]] = {}
    for o in outcomes:
        by_group.setdefault(o.group, []).append(o)
    for g, os_ in sorted(by_group.items()):
        axis = sweep_axis(os_)
        if axis is None:
            continue
        fig = d / "figures" / f"{g}_{axis}.png"
        plot_sweep(os_, axis, fig, title=g)
        paths[f"figure:{g}"] = fig
    return paths
