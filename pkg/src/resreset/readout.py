"""Dispersive single-shot readout: transients, matched filter, shots, fidelities."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .cavity import evolve_field
from .errors import FitDiverged, GridMismatch, MissingState
from .params import DeviceParams, PulseSequence, TonePulse
from .rng import block_slices, stream

SHOT_BLOCK = 10_000


class DegenerateWeights(UserWarning):
    """The two averaged transients coincide, so no weight function separates them."""


@dataclass(frozen=True)
class ReadoutConfig:
    f_rf: float
    drive_amplitude: float
    tau_r: float = 300e-9
    tau_int: float = 400e-9
    noise_sigma: float = 32.4
    threshold: float | None = None
    t1_decay: bool = True
    dt: float = 1e-9
    lo_phase: float | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not (self.tau_r > 0 and self.tau_int > 0):
            raise ValueError("tau_r and tau_int must be positive")

    @classmethod
    def from_values(cls, values: dict, params: DeviceParams) -> "ReadoutConfig":
        return cls(f_rf=float(values.get("f_rf", 0.5 * (params.f_r0 + params.f_r1))),
                   drive_amplitude=float(values.get("drive_amplitude", 5.1e7)),
                   tau_r=params.tau_r, tau_int=params.tau_int,
                   noise_sigma=float(values.get("noise_sigma", 32.4)),
                   t1_decay=bool(values.get("t1_decay", 1)))


@dataclass
class Transients:
    t: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    lo_phase: float


def measurement_tone(cfg: ReadoutConfig, params: DeviceParams) -> TonePulse:
    return TonePulse.at_frequency(cfg.f_rf, 0.0, cfg.tau_r, cfg.drive_amplitude, 0.0, params)


def _complex_records(cfg: ReadoutConfig, params: DeviceParams, seq: PulseSequence | None = None):
    tone = measurement_tone(cfg, params)
    if seq is None:
        seq = PulseSequence((tone,), max(cfg.tau_r, cfg.tau_int))
    out = []
    for state in (0, 1):
        tr = evolve_field(seq, state, params, dt=cfg.dt, t_end=cfg.tau_int)
        # demodulate at the measurement frequency
        out.append(tr.alpha * np.exp(1j * tone.detuning * tr.t))
    return tr.t, out[0], out[1]


def best_lo_phase(a0: np.ndarray, a1: np.ndarray) -> float:
    """Quadrature angle maximizing sum |Re(e^{-i phi}(a1 - a0))|^2."""
    d = a1 - a0
    return 0.5 * float(np.angle(np.sum(d * d)))


def simulate_transients(cfg: ReadoutConfig, params: DeviceParams,
                        seq: PulseSequence | None = None) -> Transients:
    """Noiseless homodyne traces for both states; ``seq`` defaults to the bare measurement."""
    t, a0, a1 = _complex_records(cfg, params, seq)
    phi = cfg.lo_phase if cfg.lo_phase is not None else best_lo_phase(a0, a1)
    rot = np.exp(-1j * phi)
    return Transients(t, (rot * a0).real, (rot * a1).real, phi)


def simulate_transient(state: int, cfg: ReadoutConfig, params: DeviceParams):
    """Noiseless homodyne trace ``(t, s_state)`` over [0, tau_int]."""
    tr = simulate_transients(cfg, params)
    return tr.t, (tr.s0 if state == 0 else tr.s1)


def optimal_weights(trace0, trace1) -> np.ndarray:
    """Difference of the averaged transients, scaled to unit peak magnitude."""
    a = np.asarray(trace0, dtype=float)
    b = np.asarray(trace1, dtype=float)
    if a.shape != b.shape:
        raise GridMismatch("transients have different lengths")
    w = b - a
    peak = np.max(np.abs(w)) if w.size else 0.0
    if peak == 0:
        warnings.warn("identical transients give zero weights", DegenerateWeights, stacklevel=2)
        return np.zeros_like(w)
    return w / peak


def separation_snr(weights, trace0, trace1) -> float:
    """Noiseless separation of integrated values in units of the integrated noise."""
    w = np.asarray(weights, dtype=float)
    norm = math.sqrt(float(np.sum(w * w)))
    if norm == 0:
        return 0.0
    return abs(float(np.sum(w * (np.asarray(trace1) - np.asarray(trace0))))) / norm


@dataclass
class ShotSet:
    values: np.ndarray
    prepared: np.ndarray
    declared: np.ndarray | None = None
    threshold: float | None = None

    def counts(self) -> dict[int, int]:
        return {s: int(np.sum(self.prepared == s)) for s in (0, 1)}

    def of_state(self, state: int) -> np.ndarray:
        return self.values[self.prepared == state]

    @staticmethod
    def concat(*sets: "ShotSet") -> "ShotSet":
        return ShotSet(np.concatenate([s.values for s in sets]),
                       np.concatenate([s.prepared for s in sets]))


def sample_shots(n_shots: int, state: int, cfg: ReadoutConfig, params: DeviceParams,
                 seed: int, transients: Transients | None = None,
                 weights: np.ndarray | None = None, stream_key: Sequence[int] = ()) -> ShotSet:
    """Integrated single-shot values for one prepared state.

    Shots are drawn in blocks of ``SHOT_BLOCK`` from streams keyed by
    ``(*stream_key, state, block)``, so any partition of the work
    reproduces the same values.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    tr = transients if transients is not None else simulate_transients(cfg, params)
    w = weights if weights is not None else optimal_weights(tr.s0, tr.s1)
    contrib0 = w * tr.s0
    contrib1 = w * tr.s1
    total0 = float(np.sum(contrib0))
    # value if the qubit jumps 1 -> 0 at sample k: sum_{<k} w s1 + sum_{>=k} w s0
    c1 = np.concatenate(([0.0], np.cumsum(contrib1)))
    c0 = np.concatenate(([0.0], np.cumsum(contrib0)))
    jump_value = c1 + (total0 - c0)
    noise_scale = cfg.noise_sigma * math.sqrt(float(np.sum(w * w)))
    n_samples = len(tr.t)
    dt = cfg.dt if n_samples < 2 else float(tr.t[1] - tr.t[0])

    vals = np.empty(n_shots)
    for b, lo, hi in block_slices(n_shots, SHOT_BLOCK):
        g = stream(seed, *stream_key, state, b)
        m = hi - lo
        noise = g.standard_normal(m) * noise_scale
        if state == 1 and cfg.t1_decay and math.isfinite(params.T1):
            tj = g.exponential(params.T1, size=m)
            k = np.minimum(np.ceil(tj / dt).astype(np.int64), n_samples)
            base = jump_value[k]
        else:
            base = np.full(m, jump_value[n_samples] if state == 1 else total0)
        vals[lo:hi] = base + noise
    return ShotSet(vals, np.full(n_shots, state, dtype=np.int8))


def assign(shots: ShotSet, threshold: float) -> ShotSet:
    return replace(shots, declared=(shots.values > threshold).astype(np.int8), threshold=threshold)


def _error_rates(shots: ShotSet) -> tuple[float, float]:
    n = shots.counts()
    if n[0] == 0 or n[1] == 0:
        raise MissingState("both prepared states are needed")
    d = shots.declared
    e01 = float(np.sum((shots.prepared == 0) & (d == 1))) / n[0]
    e10 = float(np.sum((shots.prepared == 1) & (d == 0))) / n[1]
    return e01, e10


def fa_from_errors(eps01: float, eps10: float) -> float:
    return 1.0 - 0.5 * (eps01 + eps10)


def optimal_threshold(shots: ShotSet) -> float:
    """Exhaustive scan over every distinct cut between sorted shot values."""
    n = shots.counts()
    if n[0] == 0 or n[1] == 0:
        raise MissingState("both prepared states are needed")
    order = np.argsort(shots.values, kind="stable")
    v = shots.values[order]
    p = shots.prepared[order]
    # cut after position i: shots 0..i declared 0, the rest declared 1
    zeros_below = np.concatenate(([0], np.cumsum(p == 0)))
    ones_below = np.concatenate(([0], np.cumsum(p == 1)))
    fa = 1.0 - 0.5 * ((n[0] - zeros_below) / n[0] + ones_below / n[1])
    # only cut where neighbouring values differ
    valid = np.ones(len(v) + 1, dtype=bool)
    valid[1:-1] = v[1:] > v[:-1]
    fa = np.where(valid, fa, -np.inf)
    i = int(np.argmax(fa))
    if i == 0:
        return float(v[0]) - 1.0
    if i == len(v):
        return float(v[-1]) + 1.0
    return 0.5 * float(v[i - 1] + v[i])


def assignment_fidelity(shots: ShotSet, threshold: float | None = None) -> tuple[float, float, float]:
    """(F_a, eps01, eps10); eps_ij is P(declare j | prepared i).

    Uses ``threshold`` if given, else the shots' own declarations if present,
    else the F_a-maximizing threshold.
    """
    if threshold is not None:
        shots = assign(shots, threshold)
    elif shots.declared is None:
        shots = assign(shots, optimal_threshold(shots))
    e01, e10 = _error_rates(shots)
    return fa_from_errors(e01, e10), e01, e10


def _trunc_var_factor(k: float) -> float:
    """Variance of a standard normal truncated to [-k, k]."""
    return 1.0 - 2.0 * k * stats.norm.pdf(k) / (2.0 * stats.norm.cdf(k) - 1.0)


def fit_dominant_gaussian(x, clip: float = 4.0, max_iter: int = 200,
                          tol: float = 1e-12) -> tuple[float, float]:
    """Mean and sigma of the main mode by iterated +-clip*sigma truncated ML."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise FitDiverged("need at least two samples")
    mu = float(np.median(x))
    sig = float(stats.median_abs_deviation(x, scale="normal"))
    if not sig > 0:
        sig = float(np.std(x))
    if not sig > 0:
        raise FitDiverged("zero spread")
    corr = math.sqrt(_trunc_var_factor(clip))
    for _ in range(max_iter):
        sel = x[np.abs(x - mu) <= clip * sig]
        if sel.size < 2:
            raise FitDiverged("clipping removed the sample")
        mu_new = float(np.mean(sel))
        sig_new = float(np.std(sel)) / corr
        if not (math.isfinite(mu_new) and sig_new > 0):
            raise FitDiverged("non-finite or zero width")
        if abs(mu_new - mu) <= tol * sig and abs(sig_new - sig) <= tol * sig:
            return mu_new, sig_new
        mu, sig = mu_new, sig_new
    raise FitDiverged(f"no convergence in {max_iter} iterations")


def normal_overlap(m0: float, s0: float, m1: float, s1: float) -> float:
    """Area under min(N(m0, s0), N(m1, s1))."""
    if s0 <= 0 or s1 <= 0:
        raise ValueError("standard deviations must be positive")
    # crossing points of the two densities
    a = 1 / (2 * s1**2) - 1 / (2 * s0**2)
    b = m0 / s0**2 - m1 / s1**2
    c = m1**2 / (2 * s1**2) - m0**2 / (2 * s0**2) + math.log(s1 / s0)
    if abs(a) < 1e-15 / max(s0, s1) ** 2:
        roots = [] if b == 0 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        roots = [] if disc < 0 else sorted({(-b - math.sqrt(disc)) / (2 * a),
                                             (-b + math.sqrt(disc)) / (2 * a)})
    edges = [-math.inf, *roots, math.inf]
    n0, n1 = stats.norm(m0, s0), stats.norm(m1, s1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = _interior_point(lo, hi, m0, s0)
        p0 = n0.cdf(hi) - n0.cdf(lo)
        p1 = n1.cdf(hi) - n1.cdf(lo)
        total += p0 if n0.logpdf(mid) <= n1.logpdf(mid) else p1
    return float(min(max(total, 0.0), 1.0))


def _interior_point(lo, hi, m, s):
    if math.isinf(lo) and math.isinf(hi):
        return m
    if math.isinf(lo):
        return hi - 10 * s
    if math.isinf(hi):
        return lo + 10 * s
    return 0.5 * (lo + hi)


def discrimination_fidelity(shots: ShotSet, min_shots: int = 100) -> float:
    """1 - overlap of Gaussians fitted to the dominant mode of each histogram."""
    n = shots.counts()
    if n[0] == 0 or n[1] == 0:
        raise MissingState("both prepared states are needed")
    if min(n.values()) < min_shots:
        raise FitDiverged(f"need >= {min_shots} shots per state, got {n}")
    m0, s0 = fit_dominant_gaussian(shots.of_state(0))
    m1, s1 = fit_dominant_gaussian(shots.of_state(1))
    return 1.0 - normal_overlap(m0, s0, m1, s1)


def analytic_discrimination_fidelity(tr: Transients, weights: np.ndarray,
                                     noise_sigma: float) -> float:
    """F_d of the noiseless integrated means with the integrated white-noise width."""
    sig = noise_sigma * math.sqrt(float(np.sum(weights * weights)))
    d = abs(float(np.sum(weights * (tr.s1 - tr.s0))))
    if sig == 0:
        return 1.0 if d > 0 else 0.0
    return 1.0 - normal_overlap(0.0, sig, d, sig)


def readout_experiment(cfg: ReadoutConfig, params: DeviceParams, n_shots: int, seed: int,
                       stream_key: Sequence[int] = ()) -> ShotSet:
    """Both prepared states, matched-filter weights from the noiseless transients."""
    tr = simulate_transients(cfg, params)
    w = optimal_weights(tr.s0, tr.s1)
    return ShotSet.concat(*(sample_shots(n_shots, s, cfg, params, seed, tr, w, stream_key)
                            for s in (0, 1)))


def _map_cell(args):
    i, j, amp, freq, cfg, params, n_shots, seed = args
    c = replace(cfg, drive_amplitude=float(amp), f_rf=float(freq), lo_phase=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWeights)
        shots = readout_experiment(c, params, n_shots, seed, stream_key=(i, j))
    fa, e01, e10 = assignment_fidelity(shots)
    return i, j, fa, e01, e10


def fidelity_map(power_grid: Sequence[float], freq_grid: Sequence[float], cfg: ReadoutConfig,
                 params: DeviceParams, n_shots: int = 4000, seed: int = 0,
                 workers: int = 1) -> dict[str, np.ndarray]:
    """F_a over (drive amplitude, frequency); each cell has its own RNG stream."""
    if len(power_grid) == 0 or len(freq_grid) == 0:
        raise ValueError("grids must be non-empty")
    jobs = [(i, j, a, f, cfg, params, n_shots, seed)
            for i, a in enumerate(power_grid) for j, f in enumerate(freq_grid)]
    shape = (len(power_grid), len(freq_grid))
    out = {k: np.empty(shape) for k in ("F_a", "eps01", "eps10")}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_map_cell, jobs))
    else:
        results = [_map_cell(j) for j in jobs]
    for i, j, fa, e01, e10 in results:
        out["F_a"][i, j], out["eps01"][i, j], out["eps10"][i, j] = fa, e01, e10
    out["power"] = np.asarray(power_grid, dtype=float)
    out["frequency"] = np.asarray(freq_grid, dtype=float)
    return out


def write_map_csv(path: str | Path, fmap: dict, header: str | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["power", "frequency", "F_a", "eps01", "eps10"])
        for i, p in enumerate(fmap["power"]):
            for j, f in enumerate(fmap["frequency"]):
                w.writerow([f"{p:.12g}", f"{f:.12g}", f"{fmap['F_a'][i, j]:.12g}",
                            f"{fmap['eps01'][i, j]:.12g}", f"{fmap['eps10'][i, j]:.12g}"])
    return path


def write_histogram_csv(path: str | Path, shots: ShotSet, bins: int = 100,
                        header: str | None = None) -> Path:
    path = Path(path)
    edges = np.histogram_bin_edges(shots.values, bins=bins)
    h0, _ = np.histogram(shots.of_state(0), bins=edges)
    h1, _ = np.histogram(shots.of_state(1), bins=edges)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count0", "count1"])
        for k in range(bins):
            w.writerow([f"{edges[k]:.12g}", f"{edges[k + 1]:.12g}", int(h0[k]), int(h1[k])])
    return path
