"""Conditional and unconditional depletion pulses and their tuning.

Amplitudes are drive strengths in cavity-field units (rad/s), phases in
radians referenced to absolute time. Each residual-photon evaluation reuses
the field at the end of the measurement pulse and integrates only the
depletion window.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cavity import analytic_linear_field, evolve_field, photon_observables
from .errors import DetectorSaturated, NonlinearRegime, OverlapViolation, SingularSystem
from .params import DeviceParams, PulseSequence, TonePulse
from .powell import OptimizerOptions, OptimizerResult, minimize
from .qubit import DetectorCalibration, allxy_error, estimate_nbar, run_allxy

TWO_PI = 2.0 * math.pi
PHASE_BOUNDS = (-TWO_PI, 2 * TWO_PI)

# coarse and fine evaluation delays of the two-step protocol
CONDITIONAL_STEPS = (1000e-9, 500e-9)
UNCONDITIONAL_STEPS = (1000e-9, 400e-9)


@dataclass(frozen=True)
class ConditionalPulseParams:
    A0: float = 0.0
    phi0: float = 0.0
    A1: float = 0.0
    phi1: float = 0.0
    tau_p: float = 30e-9
    latency: float = 330e-9

    def __post_init__(self):
        if self.A0 < 0 or self.A1 < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.tau_p <= 0:
            raise ValueError("tau_p must be positive")

    def tone(self, declared: int) -> tuple[float, float]:
        return (self.A0, self.phi0) if declared == 0 else (self.A1, self.phi1)


@dataclass(frozen=True)
class UnconditionalPulseParams:
    A0: float = 0.0
    phi0: float = 0.0
    A1: float = 0.0
    phi1: float = 0.0
    tau_p: float = 330e-9

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.A0, self.phi0, self.A1, self.phi1)):
            raise ValueError("parameters must be finite")
        if self.A0 < 0 or self.A1 < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.tau_p <= 0:
            raise ValueError("tau_p must be positive")


def _wrap(phi: float) -> float:
    """Phase in [0, 2pi); a tiny negative input would otherwise round to 2pi."""
    w = phi % TWO_PI
    return 0.0 if w >= TWO_PI else w


def _polar(a: float, phi: float) -> tuple[float, float]:
    """Fold a signed amplitude into (|a|, phase in [0, 2pi))."""
    if a < 0:
        a, phi = -a, phi + math.pi
    return a, _wrap(phi)


def _tone(freq_state: int, t0: float, tau_p: float, amp: float, phase: float,
          device: DeviceParams) -> TonePulse:
    a, ph = _polar(amp, phase)
    return TonePulse.at_frequency(device.resonator_frequency(freq_state), t0, t0 + tau_p,
                                  a, ph, device)


def build_depletion_sequence(kind: str, pulse, measurement: TonePulse, device: DeviceParams,
                             declared: int | None = None):
    """Measurement tone plus depletion tone(s).

    For ``conditional`` the declared outcome selects D_0 or D_1; with
    ``declared=None`` a dict {declared: sequence} is returned.
    """
    m_end = measurement.t_stop
    if kind == "unconditional":
        tones = [measurement]
        for j, (a, ph) in enumerate(((pulse.A0, pulse.phi0), (pulse.A1, pulse.phi1))):
            if a != 0:
                tones.append(_tone(j, m_end, pulse.tau_p, a, ph, device))
        return PulseSequence(tuple(tones), m_end + pulse.tau_p)
    if kind != "conditional":
        raise ValueError(f"unknown depletion kind {kind!r}")
    start = m_end + pulse.latency
    if start < m_end:
        raise OverlapViolation("conditional pulse starts before the measurement ends")
    if declared is None:
        return {d: build_depletion_sequence(kind, pulse, measurement, device, d) for d in (0, 1)}
    a, ph = pulse.tone(declared)
    tones = [measurement]
    if a != 0:
        tones.append(_tone(declared, start, pulse.tau_p, a, ph, device))
    return PulseSequence(tuple(tones), start + pulse.tau_p)


class ResidualEvaluator:
    """Residual photon number after a depletion scheme, for one measurement pulse."""

    def __init__(self, measurement: TonePulse, device: DeviceParams, dt: float = 1e-9):
        self.measurement = measurement
        self.device = device
        self.dt = dt
        seq = PulseSequence((measurement,), measurement.t_stop)
        self.alpha_end = {}
        for s in (0, 1):
            tr = evolve_field(seq, s, device, dt=dt, t_end=measurement.t_stop)
            self.alpha_end[s] = complex(tr.alpha[-1])

    def passive_nbar(self, state: int, tau_d: float) -> float:
        return abs(self.alpha_end[state]) ** 2 * math.exp(-self.device.kappa * tau_d)

    def field(self, seq: PulseSequence, state: int, tau_d: float) -> complex:
        t0 = self.measurement.t_stop
        if tau_d == 0:
            return self.alpha_end[state]
        tr = evolve_field(seq, state, self.device, dt=self.dt, init=self.alpha_end[state],
                          t0=t0, t_end=t0 + tau_d)
        return complex(tr.alpha[-1])

    def nbar(self, seq: PulseSequence, state: int, tau_d: float) -> float:
        return abs(self.field(seq, state, tau_d)) ** 2

    def unconditional(self, pulse: UnconditionalPulseParams, tau_d: float) -> tuple[float, float]:
        seq = build_depletion_sequence("unconditional", pulse, self.measurement, self.device)
        return self.nbar(seq, 0, tau_d), self.nbar(seq, 1, tau_d)

    def conditional(self, pulse: ConditionalPulseParams, prepared: int, declared: int,
                    tau_d: float) -> float:
        seq = build_depletion_sequence("conditional", pulse, self.measurement, self.device,
                                       declared)
        return self.nbar(seq, prepared, tau_d)


def _error_pair(assignment_error) -> tuple[float, float]:
    if isinstance(assignment_error, (tuple, list)):
        return float(assignment_error[0]), float(assignment_error[1])
    return float(assignment_error), float(assignment_error)


def detector_reading(seq: PulseSequence, prepared: int, tau_d: float, ev: ResidualEvaluator,
                     calib: DetectorCalibration, rng: np.random.Generator | None,
                     raw: bool = False, extrapolate: bool = False) -> float:
    """Noisy AllXY-based photon estimate (or raw E) at ``tau_d`` after the measurement.

    Readings above the calibrated range raise DetectorSaturated unless
    ``extrapolate`` is set, in which case the linear calibration is used as is.
    """
    dev = ev.device
    t_split = ev.measurement.t_stop + tau_d
    span = 2 * calib.pulse_duration + 2 * ev.dt
    a_split = ev.field(seq, prepared, tau_d)
    b0 = evolve_field(seq, 0, dev, dt=ev.dt, init=a_split, t0=t_split, t_end=t_split + span)
    b1 = evolve_field(seq, 1, dev, dt=ev.dt, init=a_split, t0=t_split, t_end=t_split + span)
    env = photon_observables(b0, b1, dev)
    e = allxy_error(run_allxy(prepared, env, t_split, dev, calib.pulse_duration))
    if rng is not None:
        e += float(rng.normal(0.0, calib.sigma_e[prepared]))
    if raw:
        return e
    est = estimate_nbar(e, calib, prepared)
    if est.saturated and not extrapolate:
        raise DetectorSaturated(f"estimated nbar {est.nbar:.3g} above {calib.nbar_max:g}")
    return est.nbar


def residual_nbar_cost(kind: str, pulse, tau_d: float, ev: ResidualEvaluator,
                       mode: str = "direct", detector: DetectorCalibration | None = None,
                       assignment_error=0.0, prepared: int | None = None,
                       rng: np.random.Generator | None = None, raw: bool = False,
                       extrapolate: bool = False) -> float:
    """Residual-photon cost.

    Unconditional: sum over both prepared states. Conditional: the cost of
    the given ``prepared`` state (or the sum if ``None``) mixing D_0 and D_1
    by the assignment-error probability of that state. ``extrapolate`` lets
    allxy readings above the calibrated range through instead of raising.
    """
    if tau_d < 0:
        raise ValueError("tau_d must be non-negative")
    if mode not in ("direct", "allxy"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "allxy" and detector is None:
        raise ValueError("allxy mode needs a detector calibration")

    def reading(seq, s):
        if mode == "direct":
            return ev.nbar(seq, s, tau_d)
        return detector_reading(seq, s, tau_d, ev, detector, rng, raw, extrapolate)

    if kind == "unconditional":
        seq = build_depletion_sequence(kind, pulse, ev.measurement, ev.device)
        return reading(seq, 0) + reading(seq, 1)
    seqs = build_depletion_sequence(kind, pulse, ev.measurement, ev.device)
    err = _error_pair(assignment_error)
    states = (0, 1) if prepared is None else (prepared,)
    total = 0.0
    for s in states:
        e = err[s]
        total += (1 - e) * reading(seqs[s], s)
        if e > 0:
            total += e * reading(seqs[1 - s], s)
    return total


def linear_oracle_unconditional(measurement: TonePulse, tau_p: float,
                                device: DeviceParams) -> UnconditionalPulseParams:
    """Tone amplitudes that null both fields at the end of the depletion pulse (K = 0)."""
    if device.kerr != 0:
        raise NonlinearRegime("the linear oracle requires kerr == 0")
    m_end = measurement.t_stop
    t_end = m_end + tau_p
    bare = PulseSequence((measurement,), t_end)
    rhs = np.array([analytic_linear_field(bare, s, device, t_end) for s in (0, 1)])
    resp = np.empty((2, 2), dtype=complex)
    for k in (0, 1):
        unit = PulseSequence((TonePulse.at_frequency(device.resonator_frequency(k), m_end, t_end,
                                                     1.0, 0.0, device),), t_end)
        for s in (0, 1):
            resp[s, k] = analytic_linear_field(unit, s, device, t_end, init=0j, t0=m_end)
    if not np.all(np.isfinite(resp)):
        raise SingularSystem("non-finite tone response")
    det = resp[0, 0] * resp[1, 1] - resp[0, 1] * resp[1, 0]
    scale = np.max(np.abs(resp)) ** 2
    if scale == 0 or abs(det) <= 1e-12 * scale:
        raise SingularSystem("tone responses are degenerate (chi = 0?)")
    c = np.linalg.solve(resp, -rhs)
    a0, p0 = abs(c[0]), _wrap(math.atan2(c[0].imag, c[0].real))
    a1, p1 = abs(c[1]), _wrap(math.atan2(c[1].imag, c[1].real))
    return UnconditionalPulseParams(float(a0), p0, float(a1), p1, tau_p)


def conditional_linear_oracle(measurement: TonePulse, pulse: ConditionalPulseParams,
                              device: DeviceParams) -> ConditionalPulseParams:
    """Per-state D_j nulling alpha_j at the end of its own pulse (K = 0, no assignment error)."""
    if device.kerr != 0:
        raise NonlinearRegime("the linear oracle requires kerr == 0")
    start = measurement.t_stop + pulse.latency
    t_end = start + pulse.tau_p
    bare = PulseSequence((measurement,), t_end)
    vals = []
    for j in (0, 1):
        target = analytic_linear_field(bare, j, device, t_end)
        unit = PulseSequence((TonePulse.at_frequency(device.resonator_frequency(j), start, t_end,
                                                     1.0, 0.0, device),), t_end)
        r = analytic_linear_field(unit, j, device, t_end, init=0j, t0=start)
        c = -target / r
        vals += [abs(c), _wrap(math.atan2(c.imag, c.real))]
    return replace(pulse, A0=vals[0], phi0=vals[1], A1=vals[2], phi1=vals[3])


@dataclass
class DepletionReport:
    kind: str
    params: object
    tau_d: float
    residual: dict
    passive: dict
    savings_kappa: dict
    steps: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": asdict(self.params),
            "tau_d": self.tau_d,
            "residual_nbar": {str(k): v for k, v in self.residual.items()},
            "passive_nbar": {str(k): v for k, v in self.passive.items()},
            "savings_over_kappa": {str(k): _json_num(v) for k, v in self.savings_kappa.items()},
            "steps": self.steps,
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def _json_num(v: float):
    return v if math.isfinite(v) else str(v)


def savings(n_passive: float, n_active: float, device: DeviceParams,
            passive_curve=None, t_ref: float = 0.0) -> float:
    """Extra passive waiting time (units of 1/kappa) needed to reach ``n_active``.

    With ``passive_curve`` (a callable of absolute delay) the time is found by
    bisection; otherwise the exponential log formula is used.
    """
    if n_active <= 0:
        return math.inf
    if n_active >= n_passive:
        return 0.0
    if passive_curve is None:
        return math.log(n_passive / n_active)
    lo, hi = t_ref, t_ref + device.kappa_inv
    while passive_curve(hi) > n_active:
        lo, hi = hi, hi + 2 * (hi - t_ref)
        if hi - t_ref > 1e4 * device.kappa_inv:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if passive_curve(mid) > n_active:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return (0.5 * (lo + hi) - t_ref) / device.kappa_inv


def _default_options(opts: OptimizerOptions | None, x0, bounds) -> OptimizerOptions:
    if opts is None:
        opts = OptimizerOptions(x0=x0, f_tol=1e-10, x_tol=1e-10, max_evals=4000)
    return replace(opts, x0=list(x0), bounds=list(bounds))


def _amp_bound(ev: ResidualEvaluator) -> float:
    return 10.0 * max(ev.measurement.amplitude, 1.0)


def two_step_optimize(kind: str, initial_params, ev: ResidualEvaluator,
                      opts: OptimizerOptions | None = None, tau_steps: Sequence[float] | None = None,
                      mode: str = "direct", detector: DetectorCalibration | None = None,
                      assignment_error=0.0, seed: int = 0) -> DepletionReport:
    """Coarse then fine Powell minimization of the residual photons.

    Coordinates are the amplitudes in units of the measurement amplitude
    (signed, folded into the phase afterwards) and the unwrapped phases.
    In allxy mode trial points above the detector range are scored by linear
    extrapolation so the search can leave them.
    """
    from .rng import stream

    if tau_steps is None:
        tau_steps = CONDITIONAL_STEPS if kind == "conditional" else UNCONDITIONAL_STEPS
    u = max(ev.measurement.amplitude, 1.0)
    amax = _amp_bound(ev) / u
    rng = stream(seed, 0) if mode == "allxy" else None

    def unpack_u(x, base):
        a0, p0 = _polar(x[0] * u, x[1])
        a1, p1 = _polar(x[2] * u, x[3])
        return replace(base, A0=a0, phi0=p0, A1=a1, phi1=p1)

    steps, traces = [], {}
    params = initial_params
    if kind == "unconditional":
        for k, tau in enumerate(tau_steps):
            x0 = [params.A0 / u, params.phi0, params.A1 / u, params.phi1]
            bounds = [(-amax, amax), PHASE_BOUNDS, (-amax, amax), PHASE_BOUNDS]
            o = _default_options(opts, x0, bounds)

            def f(x, tau=tau):
                return residual_nbar_cost(kind, unpack_u(x, params), tau, ev, mode, detector,
                                          rng=rng, extrapolate=True)
            res = minimize(f, o)
            params = unpack_u(res.x, params)
            steps.append(_step_summary(tau, res))
            traces[f"step{k + 1}"] = res
    elif kind == "conditional":
        for k, tau in enumerate(tau_steps):
            for s in (0, 1):
                a, ph = params.tone(s)
                x0 = [a / u, ph]
                bounds = [(-amax, amax), PHASE_BOUNDS]
                o = _default_options(opts, x0, bounds)

                def f(x, tau=tau, s=s, base=params):
                    aa, pp = _polar(x[0] * u, x[1])
                    trial = replace(base, **({"A0": aa, "phi0": pp} if s == 0
                                             else {"A1": aa, "phi1": pp}))
                    return residual_nbar_cost(kind, trial, tau, ev, mode, detector,
                                              assignment_error, prepared=s, rng=rng,
                                              extrapolate=True)
                res = minimize(f, o)
                aa, pp = _polar(res.x[0] * u, res.x[1])
                params = replace(params, **({"A0": aa, "phi0": pp} if s == 0
                                            else {"A1": aa, "phi1": pp}))
                steps.append(_step_summary(tau, res, state=s))
                traces[f"step{k + 1}_D{s}"] = res
    else:
        raise ValueError(f"unknown depletion kind {kind!r}")
    return make_report(kind, params, tau_steps[-1], ev, steps, traces, assignment_error)


def _step_summary(tau, res: OptimizerResult, state=None) -> dict:
    d = {"tau_d": tau, "cost": res.fun, "evals": res.n_evals, "iterations": res.n_iter,
         "reason": res.reason, "x": [float(v) for v in res.x]}
    if state is not None:
        d["state"] = state
    return d


def make_report(kind: str, params, tau_d: float, ev: ResidualEvaluator, steps=(), traces=None,
                assignment_error=0.0) -> DepletionReport:
    dev = ev.device
    err = _error_pair(assignment_error)
    residual, passive, sav = {}, {}, {}
    for s in (0, 1):
        if kind == "unconditional":
            n = ev.unconditional(params, tau_d)[s]
        else:
            n = ((1 - err[s]) * ev.conditional(params, s, s, tau_d)
                 + (err[s] * ev.conditional(params, s, 1 - s, tau_d) if err[s] else 0.0))
        residual[s] = n
        passive[s] = ev.passive_nbar(s, tau_d)
        if dev.kerr == 0:
            sav[s] = savings(passive[s], n, dev)
        else:
            sav[s] = savings(passive[s], n, dev,
                             passive_curve=lambda t, s=s: ev.passive_nbar(s, t), t_ref=tau_d)
    return DepletionReport(kind, params, tau_d, residual, passive, sav, list(steps), traces or {})


def _sweep_point(args):
    kind, tau_p, tau_d, ev, opts, use_oracle, with_fd, readout_cfg = args
    dev = ev.device
    if kind == "unconditional":
        start = (linear_oracle_unconditional(ev.measurement, tau_p, dev) if use_oracle
                 else UnconditionalPulseParams(tau_p=tau_p))
    else:
        base = ConditionalPulseParams(tau_p=tau_p)
        start = conditional_linear_oracle(ev.measurement, base, dev) if use_oracle else base
    rep = two_step_optimize(kind, start, ev, opts, tau_steps=(tau_d,) if use_oracle else None)
    row = {"tau_p": tau_p, "A0": rep.params.A0, "phi0": rep.params.phi0, "A1": rep.params.A1,
           "phi1": rep.params.phi1, "nbar0": rep.residual[0], "nbar1": rep.residual[1],
           "F_d": math.nan}
    if with_fd and readout_cfg is not None:
        row["F_d"] = depleted_discrimination(kind, rep.params, ev, readout_cfg)
    return row


def depleted_discrimination(kind: str, pulse, ev: ResidualEvaluator, readout_cfg) -> float:
    """F_d with fixed bare-measurement weights when the depletion overlaps the window."""
    from .readout import analytic_discrimination_fidelity, optimal_weights, simulate_transients

    dev = ev.device
    bare = simulate_transients(readout_cfg, dev)
    w = optimal_weights(bare.s0, bare.s1)
    if kind == "unconditional":
        seq = build_depletion_sequence(kind, pulse, ev.measurement, dev)
        tr = simulate_transients(replace(readout_cfg, lo_phase=bare.lo_phase), dev, seq)
        return analytic_discrimination_fidelity(tr, w, readout_cfg.noise_sigma)
    # conditional pulses start after the window in the default timing
    return analytic_discrimination_fidelity(bare, w, readout_cfg.noise_sigma)


def sweep_pulse_length(kind: str, tau_p_list: Sequence[float], fixed_tau_d: float,
                       ev: ResidualEvaluator, opts: OptimizerOptions | None = None,
                       use_oracle_start: bool = False, readout_cfg=None,
                       workers: int = 1) -> list[dict]:
    """One optimization per pulse length at a fixed evaluation delay."""
    if len(tau_p_list) == 0:
        raise ValueError("tau_p_list must be non-empty")
    jobs = [(kind, float(tp), fixed_tau_d, ev, opts, use_oracle_start, readout_cfg is not None,
             readout_cfg) for tp in tau_p_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]


def write_sweep_csv(path: str | Path, rows: list[dict], header: str | None = None) -> Path:
    path = Path(path)
    cols = ["tau_p", "A0", "phi0", "A1", "phi1", "nbar0", "nbar1", "F_d"]
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.12g}" for c in cols])
    return path
