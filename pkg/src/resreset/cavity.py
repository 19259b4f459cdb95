"""Qubit-state-conditioned coherent cavity field.

The field obeys, in the frame rotating at ``f_bare``,

    d(alpha)/dt = -(i w_j + i K |alpha|^2 + kappa/2) alpha - i sum_k c_k exp(-i D_k t)

with ``w_j`` the offset of the resonator for qubit state ``j`` and each tone
``k`` contributing a complex amplitude ``c_k`` at frame detuning ``D_k`` while
it is on. Tone phases are referenced to absolute time, as for sideband
modulation from a common local oscillator.
"""

from __future__ import annotations

import bisect
import cmath
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import (GridMismatch, NonFiniteAmplitude, NonlinearRegime, NonPositiveSample,
                     StepTooLarge, TooFewPoints)
from .params import DeviceParams, PulseSequence

MAX_DT = 2e-9
LINEAR_REGIME_NBAR = 8.0


@dataclass(frozen=True)
class FieldTrajectory:
    t: np.ndarray
    alpha: np.ndarray
    qubit_state: int
    params: DeviceParams

    @property
    def nbar(self) -> np.ndarray:
        return np.abs(self.alpha) ** 2

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def at(self, t: float) -> complex:
        """Field at a grid time (nearest sample)."""
        i = int(round((t - self.t[0]) / self.dt))
        return complex(self.alpha[min(max(i, 0), len(self.t) - 1)])


@dataclass(frozen=True)
class PhotonObservables:
    t: np.ndarray
    nbar0: np.ndarray
    nbar1: np.ndarray
    gamma_d: np.ndarray
    stark: np.ndarray

    @property
    def t_min(self) -> float:
        return float(self.t[0])

    @property
    def t_max(self) -> float:
        return float(self.t[-1])

    def stark_at(self, t):
        return np.interp(t, self.t, self.stark)

    def dephasing_at(self, t):
        return np.interp(t, self.t, self.gamma_d)


def _tone_table(seq: PulseSequence):
    return [(p.t_start, p.t_stop, p.complex_amplitude, p.detuning) for p in seq.tones]


def evolve_field(seq: PulseSequence, qubit_state: int, params: DeviceParams,
                 dt: float = 1e-9, init: complex = 0j, t0: float = 0.0,
                 t_end: float | None = None) -> FieldTrajectory:
    """Fixed-step RK4 integration on a uniform grid from ``t0`` to ``t_end``.

    Steps that contain a tone edge are split at the edge so the square
    envelopes do not degrade the integrator order. ``dt`` is shrunk slightly
    if needed so that the grid ends exactly at ``t_end``.
    """
    if dt > MAX_DT * (1 + 1e-12):
        raise StepTooLarge(f"dt={dt:g} s exceeds {MAX_DT:g} s")
    if t_end is None:
        t_end = seq.total_duration
    span = t_end - t0
    if span < 0:
        raise ValueError("t_end before t0")
    n = max(1, math.ceil(span / dt - 1e-9)) if span > 0 else 0
    h = span / n if n else 0.0
    grid = t0 + h * np.arange(n + 1)

    lam = complex(0.5 * params.kappa, params.cavity_detuning(qubit_state))
    kerr = params.kerr
    tones = _tone_table(seq)
    edges = sorted({e for ts, te, _, _ in tones for e in (ts, te)})
    # active tones for each interval between consecutive edges
    active_by_slot = []
    bounds = [-math.inf] + edges + [math.inf]
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        mid = 0.5 * (lo + hi) if math.isfinite(lo) and math.isfinite(hi) else (
            lo + 1.0 if math.isfinite(lo) else hi - 1.0)
        active_by_slot.append([(c, d) for ts, te, c, d in tones if ts <= mid < te])

    out = np.empty(n + 1, dtype=complex)
    a = complex(init)
    out[0] = a
    iexp = cmath.exp

    for i in range(n):
        ta = float(grid[i])
        tb = float(grid[i + 1])
        lo = bisect.bisect_right(edges, ta)
        hi = bisect.bisect_left(edges, tb)
        pts = [ta, *edges[lo:hi], tb] if hi > lo else (ta, tb)
        for s in range(len(pts) - 1):
            sa, sb = pts[s], pts[s + 1]
            hs = sb - sa
            if hs <= 0:
                continue
            act = active_by_slot[bisect.bisect_right(edges, 0.5 * (sa + sb))]
            if act:
                def drive(t, act=act):
                    return sum(c * iexp(-1j * d * t) for c, d in act)
                fa, fm, fb = drive(sa), drive(sa + 0.5 * hs), drive(sb)
            else:
                fa = fm = fb = 0j
            if kerr:
                def rhs(x, f):
                    return -(lam + 1j * kerr * (x.real * x.real + x.imag * x.imag)) * x - 1j * f
            else:
                def rhs(x, f):
                    return -lam * x - 1j * f
            k1 = rhs(a, fa)
            k2 = rhs(a + 0.5 * hs * k1, fm)
            k3 = rhs(a + 0.5 * hs * k2, fm)
            k4 = rhs(a + hs * k3, fb)
            a = a + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not cmath.isfinite(a):
            raise NonFiniteAmplitude(f"field diverged at t={tb:g} s")
        out[i + 1] = a
    return FieldTrajectory(grid, out, qubit_state, params)


def analytic_linear_field(seq: PulseSequence, qubit_state: int, params: DeviceParams, t,
                          init: complex = 0j, t0: float = 0.0):
    """Exact K=0 field as a superposition of per-tone piecewise-exponential responses."""
    if params.kerr != 0:
        raise NonlinearRegime("analytic solution requires kerr == 0")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    lam = complex(0.5 * params.kappa, params.cavity_detuning(qubit_state))
    res = complex(init) * np.exp(-lam * (t_arr - t0))
    for ts, te, c, d in _tone_table(seq):
        ts = max(ts, t0)
        if te <= ts:
            continue
        amp = -1j * c / (lam - 1j * d)
        on = (t_arr >= ts) & (t_arr <= te)
        after = t_arr > te
        tt = t_arr[on]
        res[on] += amp * (np.exp(-1j * d * tt) - np.exp(-1j * d * ts) * np.exp(-lam * (tt - ts)))
        at_end = amp * (np.exp(-1j * d * te) - np.exp(-1j * d * ts) * np.exp(-lam * (te - ts)))
        res[after] += at_end * np.exp(-lam * (t_arr[after] - te))
    if np.ndim(t) == 0:
        return complex(res[0])
    return res


def photon_observables(traj0: FieldTrajectory, traj1: FieldTrajectory,
                       params: DeviceParams) -> PhotonObservables:
    """Photon numbers plus measurement-induced dephasing and Stark shift.

    Gamma_d = 2 chi Im(a0 a1*), B = 2 chi Re(a0 a1*).
    """
    if traj0.t.shape != traj1.t.shape or not np.allclose(traj0.t, traj1.t, rtol=0, atol=1e-15):
        raise GridMismatch("trajectories are sampled on different grids")
    cross = traj0.alpha * np.conj(traj1.alpha)
    two_chi = 2.0 * params.chi
    return PhotonObservables(traj0.t.copy(), traj0.nbar, traj1.nbar,
                             two_chi * cross.imag, two_chi * cross.real)


def branch_trajectories(seq: PulseSequence, prepared: int, params: DeviceParams, t_split: float,
                        t_end: float, dt: float = 1e-9) -> tuple[FieldTrajectory, FieldTrajectory]:
    """Field branches once the qubit leaves the state it had during the drive.

    The cavity is driven with the qubit in ``prepared`` up to ``t_split``;
    from there the |0> and |1> branches start from the same field and evolve
    under their own resonator frequency.
    """
    pre = evolve_field(seq, prepared, params, dt=dt, t_end=t_split)
    a_split = complex(pre.alpha[-1])
    b0 = evolve_field(seq, 0, params, dt=dt, init=a_split, t0=t_split, t_end=t_end)
    b1 = evolve_field(seq, 1, params, dt=dt, init=a_split, t0=t_split, t_end=t_end)
    return b0, b1


def post_measurement_environment(seq: PulseSequence, prepared: int, params: DeviceParams,
                                 t_split: float, t_end: float,
                                 dt: float = 1e-9) -> PhotonObservables:
    b0, b1 = branch_trajectories(seq, prepared, params, t_split, t_end, dt)
    return photon_observables(b0, b1, params)


def fit_exponential_decay(nbar_samples, t_window, nbar_max: float = LINEAR_REGIME_NBAR,
                          min_points: int = 10) -> tuple[float, float]:
    """Least-squares slope of log(nbar) versus t.

    Samples above ``nbar_max`` are dropped (outside the linear regime).
    Returns ``(rate, standard_error)`` in 1/s.
    """
    n = np.asarray(nbar_samples, dtype=float)
    t = np.asarray(t_window, dtype=float)
    if n.shape != t.shape:
        raise GridMismatch("samples and times differ in length")
    if np.any(n <= 0):
        raise NonPositiveSample("photon numbers must be positive for a log fit")
    keep = n <= nbar_max
    n, t = n[keep], t[keep]
    if n.size < min_points:
        raise TooFewPoints(f"{n.size} samples in the linear regime, need {min_points}")
    y = np.log(n)
    if np.ptp(y) == 0:
        return 0.0, 0.0
    fit = stats.linregress(t, y)
    return float(-fit.slope), float(fit.stderr)


def write_trajectory_csv(path: str | Path, traj0: FieldTrajectory, traj1: FieldTrajectory,
                         params: DeviceParams, header: str | None = None) -> Path:
    obs = photon_observables(traj0, traj1, params)
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["t", "re_alpha0", "im_alpha0", "re_alpha1", "im_alpha1",
                    "nbar0", "nbar1", "Gamma_d", "B"])
        for k in range(len(obs.t)):
            a0, a1 = traj0.alpha[k], traj1.alpha[k]
            w.writerow([f"{obs.t[k]:.12g}", f"{a0.real:.12g}", f"{a0.imag:.12g}",
                        f"{a1.real:.12g}", f"{a1.imag:.12g}", f"{obs.nbar0[k]:.12g}",
                        f"{obs.nbar1[k]:.12g}", f"{obs.gamma_d[k]:.12g}", f"{obs.stark[k]:.12g}"])
    return path
