"""``fluoronav`` command line.

Exit codes: 0 success, 2 I/O, 3 matching or missing inputs, 4 optimisation,
5 parse errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import (
    DegenerateConfiguration,
    FluoroNavError,
    InsufficientPoints,
    InvalidConfig,
    MatchFailed,
    ModeInputMissing,
    NoConvergence,
    ParseError,
    RenderFailure,
    SizeMismatch,
)
from .evalmetrics import CaseResult, write_results_csv
from .experiments import load_manifest, run_cases, summarize, format_table, write_sweep_outputs
from .fiducials import detect_blobs_2d, match_2d_3d
from .geometry import RigidTransform, compose, invert
from .navigate import (
    fg_projection,
    insertion_path,
    jitter_tips,
    needle,
    read_pose_stream,
    replay,
    draw_overlay,
    default_entry,
    write_pose_stream,
)
from .phantom import (
    DEFAULT_T_MT_FG,
    PhantomSpec,
    carm_pose,
    default_intrinsics,
    load_phantom_spec,
    make_scene,
    movement,
    read_scene,
    write_scene,
)
from .plotting import plot_roadmap_errors, plot_trace
from .pose import dlt_projection
from .register import (
    Mode,
    RegistrationConfig,
    RegistrationInputs,
    estimate_carm_pose,
    load_registration_config,
    run_mode,
    save_overlay,
    write_report,
)
from .imaging import Image2D, save_image
from .optim import save_trace

log = logging.getLogger("fluoronav")

EXIT_OK, EXIT_IO, EXIT_MATCH, EXIT_OPTIM, EXIT_PARSE = 0, 2, 3, 4, 5
MATCH_ERRORS = (MatchFailed, ModeInputMissing, InsufficientPoints, DegenerateConfiguration)
OPTIM_ERRORS = (NoConvergence, InvalidConfig, RenderFailure)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, MATCH_ERRORS):
        return EXIT_MATCH
    if isinstance(exc, OPTIM_ERRORS):
        return EXIT_OPTIM
    if isinstance(exc, (OSError, SizeMismatch)):
        return EXIT_IO
    return EXIT_OPTIM if isinstance(exc, FluoroNavError) else 1


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    probe = d / ".write-test"
    probe.write_text("")
    probe.unlink()
    return d


def write_transform(path, t: RigidTransform):
    rows = t.as_matrix()[:3]
    Path(path).write_text("# 3x4 rigid transform, row-major\n"
                          + "\n".join(" ".join(repr(float(v)) for v in r) for r in rows) + "\n")


def read_transform(path) -> RigidTransform:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
    m = np.array(rows)
    if m.shape != (3, 4):
        raise ParseError(f"{path}: expected 3 rows of 4 numbers")
    try:
        return RigidTransform.from_matrix(m)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# -- phantom ------------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    spec = load_phantom_spec(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _out_dir(args.out)
    k = default_intrinsics()
    sc = make_scene(spec, carm_pose(args.angular, args.orbital), k, photons=args.photons,
                    seed=spec.seed, patient_fg=movement(args.dx, args.dy, args.dz),
                    fiducials=args.fiducials)
    write_scene(sc, out)
    print(f"scene {out}: {len(sc.model)} fiducials ({len(sc.blobs_gt)} in view), "
          f"{len(sc.targets)} targets, angular {args.angular:g} orbital {args.orbital:g}")
    return EXIT_OK


# -- register -----------------------------------------------------------------------------


def _load_cfg(args) -> RegistrationConfig:
    cfg = load_registration_config(args.config) if args.config else RegistrationConfig()
    updates = {"mode": Mode(args.mode)}
    if args.seed is not None:
        updates["seed"] = args.seed
    return replace(cfg, **updates)


def cmd_register(args) -> int:
    cfg = _load_cfg(args)
    scene = read_scene(args.scene)
    out = _out_dir(args.out)
    correction = read_transform(args.correction) if args.correction else None
    inputs = RegistrationInputs(scene.volume, scene.fluoro, scene.k, scene.model, scene.residual,
                                correction=correction, nominal_pose=carm_pose(0.0, 0.0))
    case_id = args.case_id or Path(args.scene).name
    truth = scene.truth["pose_patient_source"]
    if scene.fluoro is None:
        raise ModeInputMissing("scene has no fluoro.pgm")
    if cfg.mode != Mode.NAIVE and scene.residual is None:
        write_results_csv([CaseResult.failed(case_id, cfg.mode.value)], out / "metrics.csv")
        raise ModeInputMissing("scene has no residual.pgm; PnP initialisation needs it")
    try:
        res = run_mode(inputs, cfg)
    except (MATCH_ERRORS + OPTIM_ERRORS):
        write_results_csv([CaseResult.failed(case_id, cfg.mode.value)], out / "metrics.csv")
        raise
    row = CaseResult.evaluate(case_id, cfg.mode.value, scene.k, truth, res.extrinsic, scene.targets)
    write_results_csv([row], out / "metrics.csv")
    write_report(res, out / "report.json", extra={"case_id": case_id})
    save_overlay(inputs, res, out / "overlay")
    if res.level_traces:
        for tr, name in zip(res.level_traces, ("coarse", "fine")):
            save_trace(tr, out / f"trace_{name}.csv")
        plot_trace(res.level_traces, out / "trace.png")
    if cfg.mode == Mode.FULL and res.correspondences is not None:
        carm, _ = estimate_carm_pose(inputs, cfg.seed)
        write_transform(out / "correction.txt", compose(invert(carm), res.extrinsic))
    print(",".join(row.row()))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    cases = load_manifest(args.manifest)
    out = _out_dir(args.out)
    base = _load_cfg(argparse.Namespace(config=args.config, mode="full", seed=args.seed))
    correction = read_transform(args.correction) if args.correction else None
    outcomes = run_cases(cases, threads=args.threads, out_dir=out, correction=correction, base_cfg=base)
    paths = write_sweep_outputs(outcomes, out)
    sys.stdout.write(format_table(summarize(outcomes)) if outcomes else "no cases\n")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


# -- roadmap ------------------------------------------------------------------------------


def cmd_stream(args) -> int:
    """Synthetic needle insertion stream, noiseless truth plus a noisy measurement."""
    scene = read_scene(args.scene)
    out = _out_dir(args.out)
    t_mt_fg = scene.truth.get("pose_mt_fg", DEFAULT_T_MT_FG)
    patient_fg = scene.truth.get("pose_patient_fg", RigidTransform.identity())
    target = scene.targets.points[args.target % len(scene.targets)]
    times, poses = insertion_path(default_entry(target), target, patient_fg, t_mt_fg, args.frames)
    write_pose_stream(out / "truth.csv", times, poses)
    write_pose_stream(out / "measured.csv", times, jitter_tips(poses, args.noise_mm, args.seed or 0))
    print(f"stream {out}: {args.frames} frames, tip noise {args.noise_mm:g} mm")
    return EXIT_OK


def _calibration(scene, method: str, seed: int):
    if method == "truth":
        return fg_projection(scene.k, scene.truth["pose_fg_source"])
    if scene.residual is None:
        raise ModeInputMissing("DLT calibration needs residual.pgm")
    c = match_2d_3d(detect_blobs_2d(scene.residual), scene.model, scene.k, seed=seed)
    return dlt_projection(c)


def cmd_roadmap(args) -> int:
    scene = read_scene(args.scene)
    out = _out_dir(args.out)
    times, poses = read_pose_stream(args.stream)
    truth = read_pose_stream(args.truth)[1] if args.truth else poses
    t_mt_fg = scene.truth.get("pose_mt_fg", DEFAULT_T_MT_FG)
    p_fg = _calibration(scene, args.calibration, args.seed or 0)
    p_true = fg_projection(scene.k, scene.truth["pose_fg_source"])
    spacing = (scene.k.pixel_spacing_u, scene.k.pixel_spacing_v)
    overlays, errors = replay(poses, truth, needle(), t_mt_fg, p_fg, p_true, spacing)
    with open(out / "errors.csv", "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "t", "euclid_mm", "signed_x_mm", "signed_y_mm", "angle_deg"])
        for i, (t, e) in enumerate(zip(times, errors)):
            w.writerow([i, f"{t:.6g}"] + e.row())
    if scene.fluoro is not None and overlays:
        px = scene.fluoro.pixels
        lo, hi = float(px.min()), float(px.max())
        base = (px - lo) / (hi - lo) * 0.8 if hi > lo else np.zeros_like(px)
        picks = sorted(set(np.linspace(0, len(overlays) - 1, min(args.overlay_frames, len(overlays))).astype(int)))
        for i in picks:
            img = Image2D(draw_overlay(base, overlays[i]), scene.fluoro.pixel_spacing)
            save_image(img, out / f"overlay_{i:05d}", window=(0.0, 1.0))
    if errors:
        plot_roadmap_errors(errors, out / "errors.png")
    e = np.array([x.euclid_mm for x in errors]) if errors else np.zeros(0)
    a = np.array([x.angle_deg for x in errors]) if errors else np.zeros(0)
    if e.size:
        print(f"roadmap: {e.size} frames, tip error mean {e.mean():.6g} mm max {e.max():.6g} mm, "
              f"angle error mean {a.mean():.6g} deg")
    else:
        print("roadmap: empty stream")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluoronav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None)

    ph = sub.add_parser("phantom", help="write a synthetic scene directory")
    common(ph)
    ph.add_argument("--spec", help="phantom spec file (key = value lines)")
    ph.add_argument("--angular", type=float, default=0.0)
    ph.add_argument("--orbital", type=float, default=0.0)
    ph.add_argument("--dx", type=float, default=0.0)
    ph.add_argument("--dy", type=float, default=0.0)
    ph.add_argument("--dz", type=float, default=0.0)
    ph.add_argument("--fiducials", default="19")
    ph.add_argument("--photons", type=float, default=2000.0)
    ph.set_defaults(func=cmd_phantom)

    rg = sub.add_parser("register", help="register one scene and score it against truth")
    common(rg)
    rg.add_argument("scene")
    rg.add_argument("--mode", choices=[m.value for m in Mode], default="full")
    rg.add_argument("--config", help="registration settings (key = value lines)")
    rg.add_argument("--correction", help="stored T_patient^FG for poseonly mode")
    rg.add_argument("--case-id")
    rg.set_defaults(func=cmd_register)

    sw = sub.add_parser("sweep", help="run a manifest of cases")
    common(sw)
    sw.add_argument("manifest")
    sw.add_argument("--threads", type=int, default=1)
    sw.add_argument("--config")
    sw.add_argument("--correction")
    sw.set_defaults(func=cmd_sweep)

    st = sub.add_parser("stream", help="write a synthetic needle pose stream for a scene")
    common(st)
    st.add_argument("scene")
    st.add_argument("--frames", type=int, default=200)
    st.add_argument("--noise-mm", type=float, default=0.0)
    st.add_argument("--target", type=int, default=0, help="index of the target to insert towards")
    st.set_defaults(func=cmd_stream)

    rm = sub.add_parser("roadmap", help="replay a pose stream as a virtual roadmap")
    common(rm)
    rm.add_argument("scene")
    rm.add_argument("stream")
    rm.add_argument("--truth", help="ground-truth stream (default: the replayed stream)")
    rm.add_argument("--calibration", choices=["truth", "dlt"], default="truth")
    rm.add_argument("--overlay-frames", type=int, default=5)
    rm.set_defaults(func=cmd_roadmap)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FluoroNavError, OSError) as exc:
        code = exit_code(exc)
        print(f"fluoronav {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
