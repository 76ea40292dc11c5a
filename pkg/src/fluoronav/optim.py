"""Derivative-free bounded minimisers.

:func:`cmaes_minimize` is a (mu/mu_w, lambda)-CMA-ES for the global coarse
search; :func:`bobyqa_minimize` is a trust-region method on a quadratic
model interpolating 2n+1 points, updated by the least Frobenius-norm change
of its Hessian, for the local fine search. Both are deterministic for a
given configuration and keep every reported point inside the bounds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import InvalidConfig

PENALTY = 1e6


class Termination(str, enum.Enum):
    MAX_EVALS = "MaxEvals"
    FTOL = "FTol"
    XTOL = "XTol"
    STALL = "StallLimit"


def default_population(n: int) -> int:
    return 4 + int(math.floor(3.0 * math.log(n)))


@dataclass
class OptimizerConfig:
    """Shared configuration; each method reads the fields it needs.

    ``sigma0`` defaults to 0.1 of the mean bound width, ``rho_begin`` to
    0.05 of it. ``stall_evals`` (CMA-ES only unless set) is the window over
    which a relative best-f improvement below ``f_tol`` ends the run.
    """

    max_evals: int
    x0: np.ndarray
    bounds: np.ndarray  # (n, 2) rows of [lo, hi]
    sigma0: Optional[float] = None
    rho_begin: Optional[float] = None
    rho_end: float = 1e-4
    population: Optional[int] = None
    seed: int = 0
    f_tol: float = 1e-8
    x_tol: float = 1e-12
    stall_evals: Optional[int] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)

    @property
    def n(self) -> int:
        return len(self.x0)

    @property
    def lower(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.bounds[:, 1]

    def validate(self):
        n = self.n
        if n < 1:
            raise InvalidConfig("need at least one variable")
        if self.bounds.shape != (n, 2):
            raise InvalidConfig(f"bounds must be ({n}, 2), got {self.bounds.shape}")
        if not np.all(np.isfinite(self.bounds)) or np.any(self.lower >= self.upper):
            raise InvalidConfig("every bound needs finite lo < hi")
        if not np.all(np.isfinite(self.x0)):
            raise InvalidConfig("x0 must be finite")
        if np.any(self.x0 < self.lower) or np.any(self.x0 > self.upper):
            raise InvalidConfig("x0 lies outside the bounds")
        pop = self.population if self.population is not None else default_population(n)
        if pop < 2:
            raise InvalidConfig("population must be >= 2")
        if self.max_evals <= pop:
            raise InvalidConfig(f"max_evals ({self.max_evals}) must exceed population ({pop})")
        for name in ("sigma0", "rho_begin"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InvalidConfig(f"{name} must be positive")
        if not self.rho_end > 0:
            raise InvalidConfig("rho_end must be positive")
        if self.rho_begin is not None and self.rho_begin < self.rho_end:
            raise InvalidConfig("rho_begin must be >= rho_end")
        if self.stall_evals is not None and self.stall_evals < 1:
            raise InvalidConfig("stall_evals must be >= 1")

    def mean_width(self) -> float:
        return float(np.mean(self.upper - self.lower))


@dataclass
class OptimizerTrace:
    best_x: np.ndarray
    best_f: float
    evals_used: int
    history: List[Tuple[int, float]] = field(default_factory=list)
    termination: Termination = Termination.MAX_EVALS


def save_trace(trace: OptimizerTrace, path):
    lines = ["eval,f_best"] + [f"{i},{float(f)!r}" for i, f in trace.history]
    Path(path).write_text("\n".join(lines) + "\n")


class _Evaluator:
    """Counts evaluations and records best-so-far improvements."""

    def __init__(self, f: Callable, n: int):
        self.f = f
        self.used = 0
        self.best_x = None
        self.best_f = math.inf
        self.history: List[Tuple[int, float]] = []
        self.last_improvement = 0

    def __call__(self, x: np.ndarray) -> float:
        val = float(self.f(x.copy()))
        if math.isnan(val):
            val = math.inf
        self.used += 1
        if val < self.best_f or self.best_x is None:
            self.best_f = val
            self.best_x = x.copy()
            self.history.append((self.used, val))
            self.last_improvement = self.used
        return val

    def trace(self, term: Termination) -> OptimizerTrace:
        return OptimizerTrace(self.best_x.copy(), self.best_f, self.used, list(self.history), term)


# -- CMA-ES --------------------------------------------------------------------------


def cmaes_minimize(f: Callable[[np.ndarray], float], cfg: OptimizerConfig) -> OptimizerTrace:
    """Minimise ``f`` within box bounds by CMA-ES.

    Sampled candidates are clipped to the box and ranked on
    ``f(x_clip) + 1e6 * |x_raw - x_clip|^2``; the distribution update uses
    the raw samples. ``x0`` is evaluated first, so the result is never worse
    than the starting point.
    """
    cfg.validate()
    n = cfg.n
    lo, hi = cfg.lower, cfg.upper
    lam = cfg.population if cfg.population is not None else default_population(n)
    mu = lam // 2
    w = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chin = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
    stall = cfg.stall_evals if cfg.stall_evals is not None else max(20 * n, 20 * lam)
    hist_len = max(1, int(math.ceil(stall / lam)))

    rng = np.random.default_rng(cfg.seed)
    ev = _Evaluator(f, n)
    mean = cfg.x0.copy()
    ev(mean)
    sigma = cfg.sigma0 if cfg.sigma0 is not None else 0.1 * cfg.mean_width()
    b = np.eye(n)
    d = np.ones(n)
    c = np.eye(n)
    pc = np.zeros(n)
    ps = np.zeros(n)
    gen_best: List[float] = []
    best_at: List[Tuple[int, float]] = [(ev.used, ev.best_f)]
    gen = 0
    term = Termination.MAX_EVALS
    while ev.used + lam <= cfg.max_evals:
        z = rng.standard_normal((lam, n))
        y = (z * d) @ b.T
        raw = mean + sigma * y
        clipped = np.clip(raw, lo, hi)
        fit = np.empty(lam)
        # candidates are consumed in index order, so the run is reproducible
        for i in range(lam):
            pen = PENALTY * float(np.sum((raw[i] - clipped[i]) ** 2))
            fit[i] = ev(clipped[i]) + pen
        order = np.argsort(fit, kind="stable")
        sel = order[:mu]
        ystep = w @ y[sel]
        mean = mean + sigma * ystep
        zstep = w @ z[sel]
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (b @ zstep)
        gen += 1
        ps_norm = float(np.linalg.norm(ps))
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chin < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * ystep
        rank_mu = (y[sel].T * w) @ y[sel]
        c = (
            (1 - c1 - cmu) * c
            + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * c)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (ps_norm / chin - 1))
        c = (c + c.T) / 2
        evals, b = np.linalg.eigh(c)
        d = np.sqrt(np.maximum(evals, 1e-300))

        gen_best.append(float(fit[order[0]]))
        gen_best = gen_best[-hist_len:]
        best_at.append((ev.used, ev.best_f))
        finite = fit[np.isfinite(fit)]
        scale = max(abs(ev.best_f), 1e-300)
        if sigma * math.sqrt(float(np.max(np.diag(c)))) < cfg.x_tol:
            term = Termination.XTOL
            break
        if (
            len(gen_best) == hist_len
            and len(finite) == lam
            and max(max(gen_best), finite.max()) - min(min(gen_best), finite.min()) <= cfg.f_tol * scale
        ):
            term = Termination.FTOL
            break
        # best value one stall window ago versus now
        past = [fb for used, fb in best_at if used <= ev.used - stall]
        if past and past[-1] - ev.best_f <= cfg.f_tol * scale:
            term = Termination.STALL
            break
    return ev.trace(term)


# -- BOBYQA-style trust region -------------------------------------------------------


def _trust_region_step(g, h, delta, dlo, dhi):
    """Approximately minimise ``g.d + d.H.d/2`` over ``|d| <= delta`` and
    ``dlo <= d <= dhi`` by truncated conjugate gradients. A variable that
    reaches its bound is fixed there and CG restarts on the rest."""
    n = len(g)
    d = np.zeros(n)
    free = np.ones(n, dtype=bool)
    free[(dlo >= 0) & (g > 0)] = False
    free[(dhi <= 0) & (g < 0)] = False
    for _ in range(n + 1):
        r = -(g + h @ d)
        r[~free] = 0.0
        rr = float(r @ r)
        if rr <= 1e-300:
            break
        rr0 = rr
        p = r.copy()
        hit_bound = False
        for _ in range(int(free.sum())):
            hp = h @ p
            hp[~free] = 0.0
            php = float(p @ hp)
            pp, dp, dd = float(p @ p), float(d @ p), float(d @ d)
            disc = max(dp * dp + pp * (delta * delta - dd), 0.0)
            tau_tr = (-dp + math.sqrt(disc)) / pp
            tau_cg = rr / php if php > 0 else math.inf
            tau_b, ib, bval = math.inf, -1, 0.0
            for i in np.nonzero(free & (p != 0))[0]:
                lim = dhi[i] if p[i] > 0 else dlo[i]
                t = (lim - d[i]) / p[i]
                if t < tau_b:
                    tau_b, ib, bval = max(t, 0.0), i, lim
            step = min(tau_cg, tau_tr, tau_b)
            d = d + step * p
            if step == tau_b and tau_b < math.inf and tau_b <= tau_tr:
                d[ib] = bval
                free[ib] = False
                hit_bound = True
                break
            if step == tau_tr:
                return d
            r = r - step * hp
            rr_new = float(r @ r)
            if rr_new <= 1e-20 * rr0:
                return d
            p = r + (rr_new / rr) * p
            rr = rr_new
        if not hit_bound:
            break
    return d


class _Interpolation:
    """Interpolation set with a quadratic model around the best point.

    The KKT matrix of the least Frobenius-norm problem is formed in
    coordinates scaled by the set's radius, which keeps it well conditioned
    as the trust region shrinks.
    """

    def __init__(self, y: np.ndarray, fv: np.ndarray):
        self.y = y
        self.fv = fv
        n = y.shape[1]
        # previous model: value, gradient and Hessian at `center`
        self.center = y[0].copy()
        self.c = 0.0
        self.g = np.zeros(n)
        self.h = np.zeros((n, n))
        self.refresh()

    @property
    def kopt(self) -> int:
        return int(np.argmin(self.fv))

    @property
    def xopt(self) -> np.ndarray:
        return self.y[self.kopt]

    def _old_model(self, x):
        s = x - self.center
        return self.c + self.g @ s + 0.5 * s @ self.h @ s

    def _kkt_inverse(self):
        m, n = self.y.shape
        s = self.y - self.xopt
        scale = float(np.max(np.linalg.norm(s, axis=1)))
        scale = scale if scale > 0 else 1.0
        sh = s / scale
        w = np.zeros((m + n + 1, m + n + 1))
        w[:m, :m] = 0.5 * (sh @ sh.T) ** 2
        w[m, :m] = w[:m, m] = 1.0
        w[m + 1 :, :m] = sh.T
        w[:m, m + 1 :] = sh
        return np.linalg.pinv(w, rcond=1e-14), sh, scale

    def refresh(self):
        """Least Frobenius-norm change of the model that interpolates all
        current points, re-expressed around the current best point."""
        m, n = self.y.shape
        xo = self.xopt.copy()
        winv, sh, scale = self._kkt_inverse()
        resid = np.array([fv - self._old_model(p) for p, fv in zip(self.y, self.fv)])
        sol = winv[:, :m] @ resid
        lam, dc, dg = sol[:m], sol[m], sol[m + 1 :]
        s_old = xo - self.center
        c_new = self._old_model(xo) + dc
        g_new = self.g + self.h @ s_old + dg / scale
        h_new = self.h + (sh.T * lam) @ sh / scale**2
        self.center, self.c, self.g, self.h = xo, c_new, g_new, (h_new + h_new.T) / 2
        self.winv, self.sh, self.scale = winv, sh, scale

    def lagrange_values(self, x) -> np.ndarray:
        m = len(self.y)
        s = (x - self.xopt) / self.scale
        rhs = np.concatenate([0.5 * (self.sh @ s) ** 2, [1.0], s])
        return (self.winv @ rhs)[:m]

    def lagrange_gradient(self, t) -> np.ndarray:
        # the quadratic part of a Lagrange function has zero gradient at xopt
        m = len(self.y)
        return self.winv[m + 1 :, t] / self.scale

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.y - self.xopt, axis=1)

    def replace(self, t: int, x, fx):
        self.y[t] = x
        self.fv[t] = fx
        self.refresh()


def _initial_points(x0, lo, hi, rho):
    n = len(x0)
    pts = [x0.copy()]
    for i in range(n):
        for sgn in (1.0, -1.0):
            p = x0.copy()
            if x0[i] - rho < lo[i]:
                p[i] = x0[i] + (rho if sgn > 0 else 2 * rho)
            elif x0[i] + rho > hi[i]:
                p[i] = x0[i] - (rho if sgn > 0 else 2 * rho)
            else:
                p[i] = x0[i] + sgn * rho
            pts.append(np.clip(p, lo, hi))
    return np.array(pts)


def _next_rho(rho, rho_end):
    ratio = rho / rho_end
    if ratio <= 16:
        return rho_end
    if ratio <= 250:
        return math.sqrt(ratio) * rho_end
    return 0.1 * rho


def bobyqa_minimize(f: Callable[[np.ndarray], float], cfg: OptimizerConfig) -> OptimizerTrace:
    """Minimise ``f`` within box bounds by quadratic-model trust regions.

    The trust radius shrinks from ``rho_begin`` to ``rho_end``; whenever a
    step fails while interpolation points lie far from the best point, the
    farthest one is replaced by a point chosen to make its Lagrange function
    large, restoring the geometry of the set. ``x0`` is evaluated first.
    """
    cfg.validate()
    n = cfg.n
    if n < 2:
        raise InvalidConfig("the quadratic-model method needs n >= 2")
    lo, hi = cfg.lower, cfg.upper
    rho = cfg.rho_begin if cfg.rho_begin is not None else 0.05 * cfg.mean_width()
    rho = min(rho, 0.5 * float(np.min(hi - lo)))
    rho_end = min(cfg.rho_end, rho)
    ev = _Evaluator(f, n)
    pts = _initial_points(cfg.x0, lo, hi, rho)
    if cfg.max_evals < len(pts):
        raise InvalidConfig(f"max_evals must be >= {len(pts)} interpolation points")
    fv = np.array([ev(p) for p in pts])
    model = _Interpolation(pts, fv)
    delta = rho
    geometry_next = False
    term = Termination.MAX_EVALS

    def reduce_rho():
        nonlocal rho, delta
        new = _next_rho(rho, rho_end)
        delta = max(0.5 * rho, new)
        rho = new

    while ev.used < cfg.max_evals:
        if cfg.stall_evals is not None and ev.used - ev.last_improvement >= cfg.stall_evals:
            term = Termination.STALL
            break
        xopt = model.xopt.copy()
        dist = model.distances()
        if geometry_next:
            geometry_next = False
            t = int(np.argmax(dist))
            x_new = _geometry_point(model, t, max(0.1 * delta, rho), lo, hi)
            if x_new is not None:
                model.replace(t, x_new, ev(x_new))
                continue
        d = _trust_region_step(model.g, model.h, delta, lo - xopt, hi - xopt)
        dn = float(np.linalg.norm(d))
        if dn < 0.5 * rho:
            delta = max(rho, 0.1 * delta)
            if float(np.max(dist)) > 2.0 * delta:
                geometry_next = True
                continue
            if rho <= rho_end:
                term = Termination.XTOL
                break
            reduce_rho()
            continue
        x_new = np.clip(xopt + d, lo, hi)
        d = x_new - xopt
        pred = -(model.g @ d + 0.5 * d @ model.h @ d)
        f_opt = model.fv[model.kopt]
        f_new = ev(x_new)
        ratio = (f_opt - f_new) / pred if pred > 0 else -1.0
        if ratio <= 0.1:
            delta = 0.5 * delta
        elif ratio <= 0.7:
            delta = max(0.5 * delta, dn)
        else:
            delta = max(0.5 * delta, 2.0 * dn)
        if delta <= 1.5 * rho:
            delta = rho
        ell = np.abs(model.lagrange_values(x_new))
        weight = np.maximum(1.0, (dist / delta) ** 2)
        score = ell * weight
        if f_new >= f_opt:
            score[model.kopt] = -1.0
        t = int(np.argmax(score))
        if score[t] > 1e-12 or f_new < f_opt:
            model.replace(t, x_new, f_new)
        if ratio < 0.1:
            if float(np.max(model.distances())) > 2.0 * delta:
                geometry_next = True
            elif delta <= rho:
                if rho <= rho_end:
                    term = Termination.XTOL
                    break
                reduce_rho()
    return ev.trace(term)


def _geometry_point(model: _Interpolation, t: int, radius: float, lo, hi):
    """Point within ``radius`` of the best point maximising ``|l_t|``."""
    xopt = model.xopt
    dirs = []
    grad = model.lagrange_gradient(t)
    if np.linalg.norm(grad) > 0:
        dirs.append(grad / np.linalg.norm(grad))
    for j, p in enumerate(model.y):
        v = p - xopt
        nv = np.linalg.norm(v)
        if nv > 0:
            dirs.append(v / nv)
    best, best_val = None, -1.0
    for u in dirs:
        for sgn in (1.0, -1.0):
            x = np.clip(xopt + sgn * radius * u, lo, hi)
            if np.linalg.norm(x - xopt) < 1e-3 * radius:
                continue
            val = abs(model.lagrange_values(x)[t])
            if val > best_val:
                best, best_val = x, val
    return best
