import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluoronav.errors import InvalidConfig
from fluoronav.optim import OptimizerConfig, Termination, bobyqa_minimize, cmaes_minimize, default_population, save_trace


def sphere(x):
    return float(np.dot(x, x))


def rosenbrock(x):
    return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)


def rastrigin(x):
    return float(10.0 * len(x) + np.sum(x**2 - 10.0 * np.cos(2 * np.pi * x)))


def box(n, half):
    return np.tile([-half, half], (n, 1))


def test_default_population():
    assert default_population(6) == 4 + int(np.floor(3 * np.log(6)))
    assert default_population(2) == 6


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(max_evals=100, x0=[0.0, 11.0], bounds=box(2, 10)),
        dict(max_evals=100, x0=[0.0, 0.0], bounds=[[1.0, -1.0], [-1.0, 1.0]]),
        dict(max_evals=5, x0=[0.0, 0.0], bounds=box(2, 1)),
        dict(max_evals=100, x0=[0.0, 0.0], bounds=box(2, 1), sigma0=-1.0),
        dict(max_evals=100, x0=[0.0, 0.0], bounds=box(3, 1)),
        dict(max_evals=100, x0=[0.0, 0.0], bounds=box(2, 1), rho_begin=1e-6, rho_end=1e-4),
    ],
)
def test_invalid_configs_are_rejected(kwargs):
    cfg = OptimizerConfig(**kwargs)
    with pytest.raises(InvalidConfig):
        cmaes_minimize(sphere, cfg)
    with pytest.raises(InvalidConfig):
        bobyqa_minimize(sphere, cfg)


# -- CMA-ES -----------------------------------------------------------------------------------


def test_cmaes_sphere_6d():
    tr = cmaes_minimize(sphere, OptimizerConfig(5000, np.ones(6), box(6, 10), f_tol=0.0, seed=1))
    assert tr.best_f < 1e-10


def test_cmaes_rosenbrock_2d():
    tr = cmaes_minimize(rosenbrock, OptimizerConfig(20000, [-1.2, 1.0], box(2, 5), f_tol=0.0, seed=2))
    assert np.abs(tr.best_x - [1.0, 1.0]).max() < 1e-6


def test_cmaes_escapes_rastrigin_local_minima():
    # default population is far too small for Rastrigin; a wide population and
    # step size is the standard remedy
    wins = 0
    for seed in range(10):
        cfg = OptimizerConfig(20000, np.full(6, 2.0), box(6, 5.12), sigma0=2.0, population=100, seed=seed)
        wins += cmaes_minimize(rastrigin, cfg).best_f < 1.0
    assert wins >= 8


def test_cmaes_treats_non_finite_values_as_worst():
    def f(x):
        return np.inf if x[0] < 0 else sphere(x - 0.5)

    tr = cmaes_minimize(f, OptimizerConfig(3000, [1.0, 1.0], box(2, 2), seed=3))
    assert tr.best_f < 1e-6


def test_cmaes_stall_limit_terminates_early():
    tr = cmaes_minimize(lambda x: 1.0, OptimizerConfig(5000, [0.0, 0.0], box(2, 1), stall_evals=60))
    assert tr.evals_used < 5000
    assert tr.termination in (Termination.STALL, Termination.FTOL, Termination.XTOL)


# -- BOBYQA -----------------------------------------------------------------------------------


def test_bobyqa_convex_quadratic_6d():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(6, 6))
    a = m @ m.T + 6 * np.eye(6)
    c = rng.uniform(-3, 3, 6)
    calls = []

    def f(x):
        calls.append(1)
        d = x - c
        return float(d @ a @ d)

    tr = bobyqa_minimize(f, OptimizerConfig(500, np.zeros(6), box(6, 10), rho_begin=1.0, rho_end=1e-10))
    assert len(calls) <= 500
    assert np.abs(tr.best_x - c).max() < 1e-8


def test_bobyqa_rosenbrock_2d():
    tr = bobyqa_minimize(rosenbrock, OptimizerConfig(5000, [-1.2, 1.0], box(2, 5), rho_begin=0.5, rho_end=1e-10))
    assert np.abs(tr.best_x - [1.0, 1.0]).max() < 1e-6


def test_bobyqa_corner_optimum():
    tr = bobyqa_minimize(lambda x: sphere(x - 11.0), OptimizerConfig(2000, np.zeros(6), box(6, 10), rho_end=1e-8))
    assert np.abs(tr.best_x - 10.0).max() < 1e-6


def test_bobyqa_from_cmaes_best_never_increases():
    cfg = OptimizerConfig(600, np.full(4, 2.0), box(4, 5.12), seed=5)
    coarse = cmaes_minimize(rastrigin, cfg)
    fine = bobyqa_minimize(rastrigin, OptimizerConfig(400, coarse.best_x, box(4, 5.12)))
    assert fine.best_f <= coarse.best_f


# -- shared invariants ------------------------------------------------------------------------


def check_trace(tr, cfg):
    assert tr.evals_used <= cfg.max_evals
    assert np.all(tr.best_x >= cfg.lower) and np.all(tr.best_x <= cfg.upper)
    fs = [f for _, f in tr.history]
    assert all(b < a for a, b in zip(fs, fs[1:]))
    assert tr.best_f == min(fs)
    idx = [i for i, _ in tr.history]
    assert idx == sorted(idx)


@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(40, 400))
@settings(max_examples=30, deadline=None)
def test_traces_are_feasible_monotone_and_within_budget(seed, n, budget):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-5, 0, n)
    hi = lo + rng.uniform(0.5, 5, n)
    x0 = rng.uniform(lo, hi)
    shift = rng.uniform(-8, 8, n)  # optimum often outside the box
    f = lambda x: rastrigin(x - shift)
    cfg = OptimizerConfig(budget, x0, np.stack([lo, hi], axis=1), seed=seed)
    for method in (cmaes_minimize, bobyqa_minimize):
        check_trace(method(f, cfg), cfg)


def test_optimizers_are_deterministic():
    cfg = OptimizerConfig(800, np.full(3, 1.5), box(3, 4), seed=9)
    for method in (cmaes_minimize, bobyqa_minimize):
        a, b = method(rastrigin, cfg), method(rastrigin, cfg)
        assert a.best_x.tobytes() == b.best_x.tobytes()
        assert a.history == b.history


def test_trace_csv(tmp_path):
    tr = cmaes_minimize(sphere, OptimizerConfig(200, [1.0, 1.0], box(2, 2)))
    save_trace(tr, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "eval,f_best"
    assert len(lines) == len(tr.history) + 1
    assert float(lines[-1].split(",")[1]) == tr.best_f
