import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resreset.errors import MaxIterExceeded, NoBracketFound, NonFiniteObjective
from resreset.powell import (OptimizerOptions, bracket_minimum, brent_line_min, minimize)


def random_quadratic(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    a = m @ m.T + 0.1 * n * np.eye(n)
    xs = rng.normal(size=n)
    return (lambda x: 0.5 * (x - xs) @ a @ (x - xs)), xs


def iterations_to(res, target, tol):
    for it, _, _, pt in res.trace:
        if it > 0 and np.max(np.abs(pt - target)) < tol:
            return it
    return math.inf


def test_bracket_contains_minimum():
    a, b, c, fa, fb, fc = bracket_minimum(lambda t: (t - 3.7) ** 2, 0.0, 1.0)
    assert a < 3.7 < c and fb <= fa and fb <= fc


def test_bracket_respects_bounds():
    a, b, c, *_ = bracket_minimum(lambda t: -t, 0.0, 0.1, hi=2.0)
    assert c == b == 2.0


def test_bracket_fails_on_monotone():
    with pytest.raises(NoBracketFound):
        bracket_minimum(math.exp, 0.0, -1.0, max_expand=20)


def test_bracket_rejects_nan():
    with pytest.raises(NonFiniteObjective):
        bracket_minimum(lambda t: math.nan, 0.0, 1.0)


def test_brent_exact_parabola():
    br = bracket_minimum(lambda t: 2 * (t + 1.25) ** 2 + 3, 0.0, 1.0)
    t, ft = brent_line_min(lambda t: 2 * (t + 1.25) ** 2 + 3, br, tol=1e-10)
    assert t == pytest.approx(-1.25, abs=1e-7) and ft == pytest.approx(3.0)


def test_brent_non_parabolic():
    f = lambda t: math.cos(t) + 0.1 * t  # noqa: E731
    t, _ = brent_line_min(f, bracket_minimum(f, 2.0, 3.0), tol=1e-10)
    assert math.sin(t) == pytest.approx(0.1, abs=1e-7)


def test_brent_iteration_cap():
    f = lambda t: abs(t - 0.3) ** 0.5  # noqa: E731
    with pytest.raises(MaxIterExceeded):
        brent_line_min(f, bracket_minimum(f, 0.0, 1.0), tol=1e-15, max_iter=3)


@pytest.mark.parametrize("n", [2, 4])
def test_quadratic_conjugacy(n):
    worst = 0
    for seed in range(100):
        f, xs = random_quadratic(n, seed)
        res = minimize(f, OptimizerOptions(np.zeros(n), line_tol=1e-10, f_tol=1e-14, x_tol=1e-9))
        worst = max(worst, iterations_to(res, xs, 1e-6))
    assert worst <= n


def test_rosenbrock():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2  # noqa: E731
    res = minimize(f, OptimizerOptions([-1.2, 1.0], max_evals=2000, f_tol=1e-14, x_tol=1e-10))
    assert np.max(np.abs(res.x - 1)) < 1e-4
    assert res.n_evals <= 2000


def test_bounds_clamp_the_solution():
    res = minimize(lambda x: (x[0] - 5) ** 2 + (x[1] + 1) ** 2,
                   OptimizerOptions([0.0, 0.0], bounds=[(-2, 2), (-3, 3)]))
    assert res.x == pytest.approx([2.0, -1.0], abs=1e-7)


def test_budget_exhaustion_returns_best():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2  # noqa: E731
    res = minimize(f, OptimizerOptions([-1.2, 1.0], max_evals=50))
    assert res.max_eval_exceeded and res.reason == "max_evals"
    assert res.n_evals <= 50
    assert res.fun == min(v for _, _, v, _ in res.trace)


def test_trace_is_monotone_without_noise():
    f, _ = random_quadratic(3, 5)
    res = minimize(f, OptimizerOptions(np.ones(3)))
    vals = [v for _, _, v, _ in res.trace]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_trace_csv(tmp_path):
    f, _ = random_quadratic(2, 1)
    res = minimize(f, OptimizerOptions([0.0, 0.0]))
    lines = res.write_trace_csv(tmp_path / "t.csv", header="manifest: x").read_text().splitlines()
    assert lines[0] == "# manifest: x" and lines[1] == "iter,evals,best_value,x0,x1"
    assert len(lines) == 2 + len(res.trace)


def test_noisy_objective_converges_near_optimum():
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        f = lambda x: (x[0] - 1) ** 2 + (x[1] + 2) ** 2 + rng.normal(0, 0.05)  # noqa: E731
        res = minimize(f, OptimizerOptions([0.0, 0.0], m=20, noise_sigma=0.05, max_evals=4000))
        ok += np.linalg.norm(res.x - [1, -2]) < 0.1
    assert ok >= 95


def test_noise_floor_sets_tolerance():
    o = OptimizerOptions([0.0], m=16, noise_sigma=0.2)
    assert o.absolute_f_tol == pytest.approx(2 * 0.2 / 4)


def test_non_finite_objective():
    with pytest.raises(NonFiniteObjective):
        minimize(lambda x: math.inf if x[0] > 0.5 else x[0] ** 2 - x[0],
                 OptimizerOptions([0.0], max_evals=200))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 10))
def test_separable_quadratic_one_iteration(cx, cy, w):
    res = minimize(lambda x: (x[0] - cx) ** 2 + w * (x[1] - cy) ** 2,
                   OptimizerOptions([0.0, 0.0], line_tol=1e-10))
    assert iterations_to(res, np.array([cx, cy]), 1e-6) <= 1
