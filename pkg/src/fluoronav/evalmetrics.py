"""Registration error metrics and results tables.

All three distances compare a ground-truth and an estimated
``T_patient^source`` on a set of target points given in the patient (CT)
frame:

* mTRE -- mean 3D distance between the mapped targets (mm);
* mPD  -- mean distance between their projections, in detector mm;
* mRPD -- mean distance from each true target to the viewing ray of its
  estimated projection (mm). It ignores errors along the ray.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .errors import EmptyInput, ParseError
from .geometry import Intrinsics, RigidTransform, apply, backproject, project_points

SUCCESS_MM = 5.0
RESULTS_HEADER = ["case_id", "mode", "mtre", "mpd", "mrpd", "success"]


@dataclass(frozen=True)
class TargetSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyInput("a target set needs at least one point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def save_targets(t: TargetSet, path):
    lines = ["# x y z (mm, patient frame)"]
    lines += [" ".join(repr(float(c)) for c in p) for p in t.points]
    Path(path).write_text("\n".join(lines) + "\n")


def load_targets(path) -> TargetSet:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
        if len(vals) != 3:
            raise ParseError(f"expected 'x y z', got {line!r}", n)
        rows.append(vals)
    return TargetSet(np.array(rows))


def mtre(t_gt: RigidTransform, t_est: RigidTransform, targets: TargetSet) -> float:
    d = apply(t_gt, targets.points) - apply(t_est, targets.points)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def mpd(k: Intrinsics, t_gt: RigidTransform, t_est: RigidTransform, targets: TargetSet) -> float:
    """Mean projection distance on the detector (mm)."""
    duv = project_points(k, t_gt, targets.points) - project_points(k, t_est, targets.points)
    d = duv * np.array([k.pixel_spacing_u, k.pixel_spacing_v])
    return float(np.mean(np.linalg.norm(d, axis=1)))


def mrpd(k: Intrinsics, t_gt: RigidTransform, t_est: RigidTransform, targets: TargetSet) -> float:
    """Mean reprojection distance: true target to estimated viewing ray (mm)."""
    ray = backproject(k, project_points(k, t_est, targets.points))
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    x = apply(t_gt, targets.points)
    # the ray starts at the source, the origin of the source frame
    perp = x - np.sum(x * ray, axis=1, keepdims=True) * ray
    return float(np.mean(np.linalg.norm(perp, axis=1)))


def success_rate(mpds: Sequence[float], threshold: float = SUCCESS_MM) -> float:
    vals = np.asarray(list(mpds), dtype=float)
    if vals.size == 0:
        raise EmptyInput("success rate of an empty list")
    return float(np.mean(vals < threshold))


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    mode: str
    mtre: float
    mpd: float
    mrpd: float
    success: bool

    @classmethod
    def evaluate(cls, case_id, mode, k, t_gt, t_est, targets, threshold=SUCCESS_MM):
        d = mpd(k, t_gt, t_est, targets)
        return cls(case_id, mode, mtre(t_gt, t_est, targets), d,
                   mrpd(k, t_gt, t_est, targets), d < threshold)

    @classmethod
    def failed(cls, case_id, mode):
        nan = float("nan")
        return cls(case_id, mode, nan, nan, nan, False)

    def row(self) -> List[str]:
        return [self.case_id, self.mode, f"{self.mtre:.6g}", f"{self.mpd:.6g}",
                f"{self.mrpd:.6g}", "true" if self.success else "false"]


def write_results_csv(results: Iterable[CaseResult], path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in results:
            w.writerow(r.row())


def read_results_csv(path) -> List[CaseResult]:
    out = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != RESULTS_HEADER:
        raise ParseError(f"{path}: missing results header")
    for n, r in enumerate(rows[1:], 2):
        if len(r) != len(RESULTS_HEADER):
            raise ParseError(f"expected {len(RESULTS_HEADER)} fields", n)
        out.append(CaseResult(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), r[5] == "true"))
    return out
