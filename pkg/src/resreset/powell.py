"""Powell's direction-set minimizer with Brent line searches.

Written from the textbook algorithm: golden-ratio bracketing, Brent's
parabolic/golden-section line minimizer, and the classic direction update in
which the oldest direction is dropped and the net displacement of an outer
iteration is appended. Box bounds are enforced by clamping, and each line
search is confined to the segment of the line that lies inside the box.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import MaxIterExceeded, NoBracketFound, NonFiniteObjective

GOLD = 0.5 * (1.0 + math.sqrt(5.0))
CGOLD = 0.5 * (3.0 - math.sqrt(5.0))
TINY = 1e-21
EPS = float(np.finfo(float).eps)


def bracket_minimum(f: Callable[[float], float], a: float, b: float,
                    max_expand: int = 60, grow_limit: float = 100.0,
                    lo: float = -math.inf, hi: float = math.inf):
    """Golden-ratio expansion (with parabolic jumps) from ``(a, b)``.

    Returns ``(a, b, c, fa, fb, fc)`` with ``a < c``, b between them and
    f(b) below both ends. When the descent runs into ``lo`` or ``hi`` the
    bound is returned as ``b`` with ``c == b`` (a one-sided bracket).
    """
    def clip(u):
        return min(max(u, lo), hi)

    def done(a, b, c, fa, fb, fc):
        return (a, b, c, fa, fb, fc) if a <= c else (c, b, a, fc, fb, fa)

    fa, fb = f(a), f(b)
    if not (math.isfinite(fa) and math.isfinite(fb)):
        raise NonFiniteObjective("objective not finite at bracket start")
    if fb > fa:
        a, b, fa, fb = b, a, fb, fa
    c = clip(b + GOLD * (b - a))
    fc = f(c) if c != b else fb
    for _ in range(max_expand):
        if fb < fc:
            return done(a, b, c, fa, fb, fc)
        if c == b or c in (lo, hi) and fc <= fb:
            # pinned at a bound and still descending
            return done(b, c, c, fb, fc, fc)
        r = (b - a) * (fb - fc)
        q = (b - c) * (fb - fa)
        u = b - ((b - c) * q - (b - a) * r) / (2.0 * math.copysign(max(abs(q - r), TINY), q - r))
        ulim = b + grow_limit * (c - b)
        if (b - u) * (u - c) > 0:
            fu = f(u)
            if fu < fc:
                return done(b, u, c, fb, fu, fc)
            if fu > fb:
                return done(a, b, u, fa, fb, fu)
            u = clip(c + GOLD * (c - b))
            fu = f(u)
        elif (c - u) * (u - ulim) > 0:
            u = clip(u)
            fu = f(u)
            if fu < fc:
                b, c, fb, fc = c, u, fc, fu
                u = clip(c + GOLD * (c - b))
                fu = f(u)
        elif (u - ulim) * (ulim - c) >= 0:
            u = clip(ulim)
            fu = f(u)
        else:
            u = clip(c + GOLD * (c - b))
            fu = f(u)
        a, b, c = b, c, u
        fa, fb, fc = fb, fc, fu
    raise NoBracketFound(f"no bracket after {max_expand} expansions")


def brent_line_min(f: Callable[[float], float], bracket, tol: float = 1e-8,
                   max_iter: int = 200, abs_tol: float = 1e-14) -> tuple[float, float]:
    """Brent's method on a bracket ``(a, b, c)`` (optionally with f-values)."""
    a, b, c = bracket[0], bracket[1], bracket[2]
    fb = bracket[4] if len(bracket) >= 6 else f(b)
    lo, hi = (a, c) if a < c else (c, a)
    x = w = v = b
    fx = fw = fv = fb
    d = e = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (lo + hi)
        tol1 = tol * abs(x) + abs_tol
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (hi - lo):
            return x, fx
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if not (abs(p) >= abs(0.5 * q * etemp) or p <= q * (lo - x) or p >= q * (hi - x)):
                d = p / q
                u = x + d
                if u - lo < tol2 or hi - u < tol2:
                    d = math.copysign(tol1, xm - x)
                use_golden = False
        if use_golden:
            e = (lo - x) if x >= xm else (hi - x)
            d = CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = f(u)
        if not math.isfinite(fu):
            raise NonFiniteObjective(f"objective not finite at line point {u!r}")
        if fu <= fx:
            if u >= x:
                lo = x
            else:
                hi = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                lo = u
            else:
                hi = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    raise MaxIterExceeded(f"Brent did not converge in {max_iter} iterations")


@dataclass
class OptimizerOptions:
    x0: Sequence[float]
    directions: np.ndarray | None = None
    scale: Sequence[float] | None = None
    max_iter: int = 200
    f_tol: float = 1e-8
    x_tol: float = 1e-8
    max_evals: int = 5000
    bounds: Sequence[tuple[float, float]] | None = None
    m: int = 1
    noise_sigma: float = 0.0
    f_atol: float | None = None
    line_tol: float | None = None
    line_abs_tol: float | None = None

    def __post_init__(self):
        n = len(self.x0)
        if self.scale is not None and (len(self.scale) != n or min(self.scale) <= 0):
            raise ValueError("scale must have one positive entry per coordinate")
        if self.bounds is not None:
            if len(self.bounds) != n or any(lo >= hi for lo, hi in self.bounds):
                raise ValueError("bounds need lower < upper for every coordinate")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def line_tolerances(self) -> tuple[float, float]:
        """(relative, absolute) Brent tolerances; looser when the objective is noisy."""
        noisy = self.noise_sigma > 0
        rel = self.line_tol if self.line_tol is not None else (1e-3 if noisy else 1e-6)
        ab = self.line_abs_tol if self.line_abs_tol is not None else (1e-3 if noisy else 1e-12)
        return rel, ab

    @property
    def absolute_f_tol(self) -> float:
        if self.f_atol is not None:
            return self.f_atol
        if self.noise_sigma > 0:
            return 2.0 * self.noise_sigma / math.sqrt(self.m)
        return 1e-300


@dataclass
class OptimizerResult:
    x: np.ndarray
    fun: float
    n_evals: int
    n_iter: int
    trace: list[tuple[int, int, float, np.ndarray]] = field(default_factory=list)
    reason: str = ""
    max_eval_exceeded: bool = False

    def write_trace_csv(self, path: str | Path, header: str | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            n = len(self.x)
            w.writerow(["iter", "evals", "best_value"] + [f"x{k}" for k in range(n)])
            for it, ev, val, pt in self.trace:
                w.writerow([it, ev, f"{val:.12g}"] + [f"{v:.12g}" for v in pt])
        return path


class _BudgetExhausted(Exception):
    pass


class _Objective:
    """Counts evaluations, clamps to bounds, averages m draws, tracks the best point."""

    def __init__(self, f, opts: OptimizerOptions):
        self.f = f
        self.m = opts.m
        self.max_evals = opts.max_evals
        n = len(opts.x0)
        if opts.bounds is None:
            self.lo = np.full(n, -np.inf)
            self.hi = np.full(n, np.inf)
        else:
            self.lo = np.array([b[0] for b in opts.bounds], dtype=float)
            self.hi = np.array([b[1] for b in opts.bounds], dtype=float)
        self.n_evals = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf

    def clamp(self, x):
        return np.minimum(np.maximum(np.asarray(x, dtype=float), self.lo), self.hi)

    def __call__(self, x) -> float:
        if self.n_evals + self.m > self.max_evals:
            raise _BudgetExhausted
        x = self.clamp(x)
        vals = [float(self.f(x)) for _ in range(self.m)]
        self.n_evals += self.m
        val = math.fsum(vals) / self.m
        if not math.isfinite(val):
            raise NonFiniteObjective(f"objective returned {val!r} at {x.tolist()}")
        if val < self.best_f:
            self.best_f, self.best_x = val, x.copy()
        return val

    def line_limits(self, x, d) -> tuple[float, float]:
        """Parameter range t such that x + t d stays inside the box."""
        tmin, tmax = -math.inf, math.inf
        for xi, di, lo, hi in zip(x, d, self.lo, self.hi):
            if di > 0:
                tmin = max(tmin, (lo - xi) / di)
                tmax = min(tmax, (hi - xi) / di)
            elif di < 0:
                tmin = max(tmin, (hi - xi) / di)
                tmax = min(tmax, (lo - xi) / di)
        return tmin, tmax


def _line_search(obj: _Objective, x, fx, d, opts: OptimizerOptions):
    tmin, tmax = obj.line_limits(x, d)
    if tmax - tmin <= 0:
        return x, fx, 0.0

    def g(t):
        if t == 0.0:
            return fx
        return obj(x + t * d)

    step = 1.0
    if math.isfinite(tmax) or math.isfinite(tmin):
        step = min(1.0, 0.5 * max(tmax, -tmin)) if max(tmax, -tmin) > 0 else 1.0
    b0 = step if tmax > 0 else -step
    try:
        br = bracket_minimum(g, 0.0, b0, lo=tmin, hi=tmax)
    except NoBracketFound:
        return x, fx, 0.0
    a, b, c = br[0], br[1], br[2]
    if a == c or b == a or b == c:
        t, ft = b, br[4]
    else:
        rel, ab = opts.line_tolerances
        t, ft = brent_line_min(g, br, tol=rel, abs_tol=ab)
        t, ft = _polish(g, t, ft, 0.25 * (c - a), tmin, tmax,
                        opts.noise_sigma / math.sqrt(opts.m))
    if ft < fx:
        return obj.clamp(x + t * d), ft, t
    return x, fx, 0.0


def _polish(g, t, ft, h, tmin, tmax, noise=0.0):
    """One wide central-difference Newton step from Brent's answer.

    Brent stops at roughly sqrt(eps) relative accuracy because nearby
    function values differ only by rounding. A symmetric stencil of width
    ``h`` resolves the vertex of a locally quadratic line function far more
    precisely; the step is kept only if it does not raise the value.
    """
    if not (h > 0 and t - h >= tmin and t + h <= tmax):
        return t, ft
    fm, fp = g(t - h), g(t + h)
    curv = fp - 2.0 * ft + fm
    if not curv > 0:
        return t, ft
    tv = t - 0.5 * h * (fp - fm) / curv
    if not (tmin <= tv <= tmax) or abs(tv - t) > h:
        return t, ft
    fv = g(tv)
    # near-ties go to the stencil vertex, which is the more precise estimate;
    # "near" is measured against the stencil curvature, not |f|, because
    # cancellation inside f can make its rounding far larger than eps*|f|
    # (for a noisy objective, differences within the noise also count as ties)
    slack = 1e-10 * curv + 8.0 * EPS * abs(ft) + 2.0 * noise
    return (tv, fv) if fv <= ft + slack else (t, ft)


def _normalized_det(dirs: np.ndarray) -> float:
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms == 0):
        return 0.0
    return abs(float(np.linalg.det(dirs / norms[:, None])))


def minimize(f: Callable[[np.ndarray], float], opts: OptimizerOptions) -> OptimizerResult:
    """Powell minimization from ``opts.x0``.

    Stops when one outer iteration lowers the value by less than
    ``f_tol * (|f0| + |f1|)/2 + f_atol`` (``f_atol`` defaults to
    ``2 sigma / sqrt(m)`` for a noisy objective), when the point moves less
    than ``x_tol``, or when the iteration or evaluation budget runs out.
    """
    obj = _Objective(f, opts)
    n = len(opts.x0)
    scale = np.ones(n) if opts.scale is None else np.asarray(opts.scale, dtype=float)
    axes = np.diag(scale)
    dirs = axes.copy() if opts.directions is None else np.array(opts.directions, dtype=float)
    x = obj.clamp(opts.x0)
    trace: list = []
    reason = ""
    exceeded = False
    it = 0
    fx = math.inf
    try:
        fx = obj(x)
        trace.append((0, obj.n_evals, fx, x.copy()))
        for it in range(1, opts.max_iter + 1):
            x_start, f_start = x.copy(), fx
            for k in range(n):
                x, fx, _ = _line_search(obj, x, fx, dirs[k], opts)
            disp = x - x_start
            if np.any(disp != 0):
                # classic update: drop the oldest direction, append the net displacement
                dirs = np.vstack([dirs[1:], disp])
                x, fx, _ = _line_search(obj, x, fx, disp, opts)
                if _normalized_det(dirs) < 1e-6:
                    dirs = axes.copy()
            trace.append((it, obj.n_evals, fx, x.copy()))
            drop = f_start - fx
            if 2.0 * drop <= opts.f_tol * (abs(f_start) + abs(fx)) + 2.0 * opts.absolute_f_tol:
                reason = "f_tol"
                break
            if np.all(np.abs(x - x_start) <= opts.x_tol * (1.0 + np.abs(x))):
                reason = "x_tol"
                break
        else:
            reason = "max_iter"
    except _BudgetExhausted:
        reason = "max_evals"
        exceeded = True
    if obj.best_x is None:
        raise NonFiniteObjective("no evaluation completed within the budget")
    # Report the accepted iterate. For a noiseless objective any lower value
    # seen inside an interrupted line search is also safe to report; with
    # noise the lowest single reading is biased low, so it is not used.
    best_x, best_f = x.copy(), fx
    if opts.noise_sigma == 0 and obj.best_f < best_f:
        best_x, best_f = obj.best_x, obj.best_f
    if trace[-1][2] > best_f:
        trace.append((it, obj.n_evals, best_f, best_x.copy()))
    return OptimizerResult(best_x, best_f, obj.n_evals, it, trace, reason, exceeded)
