"""Two-level ancilla under relaxation, dephasing and photon-induced shifts.

Density matrices are plain 2x2 complex arrays in the basis (|0>, |1>) with
sigma_z = diag(1, -1) and sigma_minus = |0><1|. The master equation is

    drho/dt = -i[H, rho] + gamma1 D[sigma_minus] rho + (gamma_phi + Gamma_d)/2 D[sigma_z] rho
    H = B/2 sigma_z + rabi/2 (cos(phase) sigma_x + sin(phase) sigma_y)

so that with ``rabi = 0`` the coherence rho[0, 1] picks up
exp(-int(gamma_phi + Gamma_d) - gamma1 t / 2 - i int B).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.linalg import expm

from .cavity import PhotonObservables, post_measurement_environment
from .errors import EnvelopeTooShort, NonHermitianInput, PoorLinearity
from .params import DeviceParams, PulseSequence, TonePulse

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
SM = np.array([[0, 1], [0, 0]], dtype=complex)
I2 = np.eye(2, dtype=complex)

RHO0 = np.array([[1, 0], [0, 0]], dtype=complex)
RHO1 = np.array([[0, 0], [0, 1]], dtype=complex)

# 3-point Gauss-Legendre on [0, 1]
_GL_X = 0.5 + 0.5 * np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0

DEFAULT_PULSE = 20e-9


class PhotonEnvironment(Protocol):
    t_min: float
    t_max: float

    def stark_at(self, t): ...

    def dephasing_at(self, t): ...


@dataclass(frozen=True)
class ConstantEnvironment:
    """Time-independent Stark shift ``b`` [rad/s] and dephasing ``gamma_d`` [1/s]."""

    b: float = 0.0
    gamma_d: float = 0.0
    t_min: float = -math.inf
    t_max: float = math.inf

    def stark_at(self, t):
        return np.full(np.shape(t), self.b) if np.ndim(t) else self.b

    def dephasing_at(self, t):
        return np.full(np.shape(t), self.gamma_d) if np.ndim(t) else self.gamma_d


def basis_state(state: int) -> np.ndarray:
    return (RHO0 if state == 0 else RHO1).copy()


def coherence(rho: np.ndarray) -> complex:
    """rho[1, 0]; its phase advances by +int(B)."""
    return complex(rho[1, 0])


def excited_population(rho: np.ndarray) -> float:
    return float(rho[1, 1].real)


def check_density_matrix(rho: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise NonHermitianInput(f"expected a 2x2 matrix, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol * max(1.0, np.max(np.abs(rho))):
        raise NonHermitianInput("density matrix is not Hermitian")
    return rho


def _superop_left_right(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # row-major vec: vec(a rho b) = kron(a, b.T) vec(rho)
    return np.kron(a, b.T)


def _dissipator(x: np.ndarray) -> np.ndarray:
    xdx = x.conj().T @ x
    return (_superop_left_right(x, x.conj().T)
            - 0.5 * _superop_left_right(xdx, I2) - 0.5 * _superop_left_right(I2, xdx))


_D_MINUS = _dissipator(SM)
_D_Z = _dissipator(SZ)


def _commutator(h: np.ndarray) -> np.ndarray:
    return -1j * (_superop_left_right(h, I2) - _superop_left_right(I2, h))


_C_Z = _commutator(SZ)
_C_X = _commutator(SX)
_C_Y = _commutator(SY)


def _window_averages(fn, a: float, b: float, n_steps: int):
    """Per-step mean of ``fn`` over [a, b] split into ``n_steps`` (Gauss-Legendre)."""
    edges = np.linspace(a, b, n_steps + 1)
    h = edges[1:] - edges[:-1]
    nodes = edges[:-1, None] + h[:, None] * _GL_X[None, :]
    vals = np.asarray(fn(nodes.ravel()), dtype=float).reshape(nodes.shape)
    return vals @ _GL_W


def evolve_qubit(rho: np.ndarray, duration: float, params: DeviceParams,
                 detuning_fn: Callable | None = None, dephasing_fn: Callable | None = None,
                 rabi: float = 0.0, drive_phase: float = 0.0, t0: float = 0.0,
                 max_step: float = 0.5e-9) -> np.ndarray:
    """Integrate the master equation over ``[t0, t0 + duration]``.

    ``detuning_fn`` gives B(t) [rad/s] and ``dephasing_fn`` Gamma_d(t) [1/s]
    at absolute times; ``None`` means zero. Each step uses the exact
    propagator of the step-averaged generator, which is exact whenever the
    generators commute (``rabi == 0``).
    """
    rho = check_density_matrix(rho)
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if duration == 0:
        return rho.copy()

    g1, gphi = params.gamma1, params.gamma_phi
    if rabi == 0.0:
        n = max(1, math.ceil(duration / max_step))
        b_int = (_window_averages(detuning_fn, t0, t0 + duration, n).sum() * duration / n
                 if detuning_fn is not None else 0.0)
        gd_int = (_window_averages(dephasing_fn, t0, t0 + duration, n).sum() * duration / n
                  if dephasing_fn is not None else 0.0)
        decay = math.exp(-g1 * duration)
        out = np.empty((2, 2), dtype=complex)
        out[1, 1] = rho[1, 1] * decay
        out[0, 0] = rho[0, 0] + rho[1, 1] * (1.0 - decay)
        c = rho[0, 1] * np.exp(-(gphi * duration + gd_int) - 0.5 * g1 * duration - 1j * b_int)
        out[0, 1] = c
        out[1, 0] = np.conj(c)
        return out

    n = max(1, math.ceil(duration / max_step))
    h = duration / n
    b_avg = (_window_averages(detuning_fn, t0, t0 + duration, n)
             if detuning_fn is not None else np.zeros(n))
    gd_avg = (_window_averages(dephasing_fn, t0, t0 + duration, n)
              if dephasing_fn is not None else np.zeros(n))
    drive = 0.5 * rabi * (math.cos(drive_phase) * _C_X + math.sin(drive_phase) * _C_Y)
    base = drive + g1 * _D_MINUS + 0.5 * gphi * _D_Z
    v = rho.reshape(4)
    cache: dict[tuple[float, float], np.ndarray] = {}
    for k in range(n):
        key = (float(b_avg[k]), float(gd_avg[k]))
        prop = cache.get(key)
        if prop is None:
            gen = base + 0.5 * key[0] * _C_Z + 0.5 * key[1] * _D_Z
            prop = expm(gen * h)
            cache[key] = prop
        v = prop @ v
    out = v.reshape(2, 2)
    return 0.5 * (out + out.conj().T)


def rotation(axis: str, angle: float) -> np.ndarray:
    """Ideal unitary exp(-i angle/2 sigma_axis)."""
    s = {"x": SX, "y": SY, "z": SZ}[axis]
    return math.cos(angle / 2) * I2 - 1j * math.sin(angle / 2) * s


def apply_unitary(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    return u @ rho @ u.conj().T


def apply_finite_pulse(rho: np.ndarray, axis: str, angle: float, pulse_duration: float,
                       photon_env: PhotonEnvironment | None, t_offset: float,
                       params: DeviceParams) -> np.ndarray:
    """Square Rabi pulse of rate angle/duration with photon shifts switched on."""
    if pulse_duration <= 0:
        raise ValueError("pulse_duration must be positive")
    phase = 0.0 if axis == "x" else math.pi / 2
    rabi = angle / pulse_duration
    if rabi < 0:
        rabi, phase = -rabi, phase + math.pi
    det = photon_env.stark_at if photon_env is not None else None
    dep = photon_env.dephasing_at if photon_env is not None else None
    return evolve_qubit(rho, pulse_duration, params, det, dep, rabi=rabi, drive_phase=phase,
                        t0=t_offset)


def idle(rho, duration, photon_env, t_offset, params):
    det = photon_env.stark_at if photon_env is not None else None
    dep = photon_env.dephasing_at if photon_env is not None else None
    return evolve_qubit(rho, duration, params, det, dep, t0=t_offset)


# ---------------------------------------------------------------- AllXY

ALLXY_PAIRS = (
    "II", "XX", "YY", "XY", "YX",
    "xI", "yI", "xy", "yx", "xY", "yX", "Xy", "Yx", "xX", "Xx", "yY", "Yy",
    "XI", "YI", "xx", "yy",
)

_PULSE_MAP = {
    "I": None,
    "X": ("x", math.pi), "Y": ("y", math.pi),
    "x": ("x", math.pi / 2), "y": ("y", math.pi / 2),
}


@dataclass(frozen=True)
class AllXYResult:
    labels: tuple[str, ...]
    f1: np.ndarray
    ideal: np.ndarray
    initial_state: int = 0


def allxy_ideal(initial_state: int = 0) -> np.ndarray:
    out = []
    for pair in ALLXY_PAIRS:
        rho = basis_state(initial_state)
        for ch in pair:
            op = _PULSE_MAP[ch]
            if op is not None:
                rho = apply_unitary(rho, rotation(*op))
        out.append(round(excited_population(rho), 12))
    return np.array(out)


def run_allxy(initial_state: int, photon_env: PhotonEnvironment | None, t_start_pulses: float,
              params: DeviceParams, pulse_duration: float = DEFAULT_PULSE,
              buffer: float = 0.0) -> AllXYResult:
    """Each of the 21 pairs starts at ``t_start_pulses``; ideal final readout."""
    span = 2 * pulse_duration + buffer
    if photon_env is not None and (photon_env.t_min > t_start_pulses + 1e-15
                                   or photon_env.t_max < t_start_pulses + span - 1e-15):
        raise EnvelopeTooShort(
            f"environment covers [{photon_env.t_min:g}, {photon_env.t_max:g}] s, "
            f"need [{t_start_pulses:g}, {t_start_pulses + span:g}] s")
    f1 = np.empty(len(ALLXY_PAIRS))
    cache: dict[str, np.ndarray] = {}
    for k, pair in enumerate(ALLXY_PAIRS):
        # pairs sharing a first pulse share its evolution
        first = pair[0]
        if first not in cache:
            rho = basis_state(initial_state)
            op = _PULSE_MAP[first]
            if op is None:
                rho = idle(rho, pulse_duration, photon_env, t_start_pulses, params)
            else:
                rho = apply_finite_pulse(rho, op[0], op[1], pulse_duration, photon_env,
                                         t_start_pulses, params)
            if buffer:
                rho = idle(rho, buffer, photon_env, t_start_pulses + pulse_duration, params)
            cache[first] = rho
        rho = cache[first]
        t2 = t_start_pulses + pulse_duration + buffer
        op = _PULSE_MAP[pair[1]]
        if op is None:
            rho = idle(rho, pulse_duration, photon_env, t2, params)
        else:
            rho = apply_finite_pulse(rho, op[0], op[1], pulse_duration, photon_env, t2, params)
        f1[k] = excited_population(rho)
    return AllXYResult(ALLXY_PAIRS, f1, allxy_ideal(initial_state), initial_state)


def allxy_error(result: AllXYResult) -> float:
    """Mean absolute deviation from the ideal two-step staircase."""
    return float(np.mean(np.abs(np.asarray(result.f1) - result.ideal)))


def write_allxy_csv(path, result: AllXYResult) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "ideal", "f1"])
        for lab, ide, val in zip(result.labels, result.ideal, result.f1):
            w.writerow([lab, f"{ide:.6g}", f"{val:.12g}"])


# ---------------------------------------------------------------- detector

@dataclass(frozen=True)
class DetectorCalibration:
    alpha_coef: dict[int, float]
    beta_offset: dict[int, float]
    r_squared: dict[int, float]
    nbar_max: float
    sigma_e: dict[int, float]
    pulse_duration: float = DEFAULT_PULSE

    def delta_nbar(self, state: int) -> float:
        return self.sigma_e[state] / self.alpha_coef[state]

    def to_dict(self) -> dict:
        return {
            "alpha_coef": {str(k): v for k, v in self.alpha_coef.items()},
            "beta_offset": {str(k): v for k, v in self.beta_offset.items()},
            "r_squared": {str(k): v for k, v in self.r_squared.items()},
            "sigma_e": {str(k): v for k, v in self.sigma_e.items()},
            "nbar_max": self.nbar_max,
            "pulse_duration": self.pulse_duration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorCalibration":
        conv = lambda m: {int(k): float(v) for k, v in m.items()}  # noqa: E731
        return cls(conv(d["alpha_coef"]), conv(d["beta_offset"]), conv(d["r_squared"]),
                   float(d["nbar_max"]), conv(d["sigma_e"]), float(d["pulse_duration"]))


@dataclass(frozen=True)
class NbarEstimate:
    nbar: float
    underflow: bool = False
    saturated: bool = False


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def steady_drive_amplitude(nbar: float, frequency: float, state: int,
                           params: DeviceParams) -> float:
    """Linear-response drive strength giving ``nbar`` photons in steady state."""
    delta = params.cavity_detuning(state) - params.tone_detuning(frequency)
    return math.sqrt(nbar * (delta**2 + 0.25 * params.kappa**2))


def detector_environment(nbar: float, state: int, params: DeviceParams, frequency: float,
                         drive_duration: float, window: float, dt: float = 1e-9):
    """Photon environment right after a long drive prepared for ``nbar`` photons."""
    eps = steady_drive_amplitude(nbar, frequency, state, params)
    seq = PulseSequence((TonePulse.at_frequency(frequency, 0.0, drive_duration, eps, 0.0,
                                                params),), drive_duration + window)
    env = post_measurement_environment(seq, state, params, drive_duration,
                                       drive_duration + window, dt)
    return env, float(env.nbar0[0])


def detector_response(nbar: float, state: int, params: DeviceParams, frequency: float,
                      drive_duration: float = 1800e-9,
                      pulse_duration: float = DEFAULT_PULSE) -> tuple[float, float]:
    """Noiseless E_AllXY measured right after the drive ends; returns (nbar_at_end, E)."""
    if nbar <= 0:
        return 0.0, allxy_error(run_allxy(state, None, 0.0, params, pulse_duration))
    env, n_end = detector_environment(nbar, state, params, frequency, drive_duration,
                                      2 * pulse_duration + 2e-9)
    res = run_allxy(state, env, drive_duration, params, pulse_duration)
    return n_end, allxy_error(res)


def calibrate_detector(params: DeviceParams, steady_drive_duration: float = 1800e-9,
                       nbar_grid: Sequence[float] = tuple(np.linspace(0, 30, 16)),
                       frequency: float | None = None, pulse_duration: float = DEFAULT_PULSE,
                       sensitivity: float = 0.3, min_r2: float = 0.95,
                       states: Sequence[int] = (0, 1)) -> DetectorCalibration:
    """Fit E_AllXY = alpha * nbar + beta for each input state.

    The detector noise level ``sigma_e`` is set so that ``sigma_e / alpha``
    equals the requested ``sensitivity`` in photons.
    """
    grid = np.asarray(nbar_grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > 30 + 1e-9):
        raise ValueError("nbar_grid must lie within [0, 30]")
    freq = frequency if frequency is not None else 0.5 * (params.f_r0 + params.f_r1)
    alpha, beta, r2, sig = {}, {}, {}, {}
    for s in states:
        xs, ys = [], []
        for nb in grid:
            n_end, e = detector_response(nb, s, params, freq, steady_drive_duration,
                                         pulse_duration)
            xs.append(n_end)
            ys.append(e)
        a, b, r = linear_fit(xs, ys)
        if r < min_r2:
            raise PoorLinearity(f"state {s}: R^2={r:.4f} below {min_r2}")
        alpha[s], beta[s], r2[s] = a, b, r
        sig[s] = sensitivity * a
    return DetectorCalibration(alpha, beta, r2, float(grid.max()), sig, pulse_duration)


def estimate_nbar(e_allxy: float, calib: DetectorCalibration, input_state: int) -> NbarEstimate:
    raw = (e_allxy - calib.beta_offset[input_state]) / calib.alpha_coef[input_state]
    if raw < 0:
        return NbarEstimate(0.0, underflow=True)
    return NbarEstimate(raw, saturated=raw > calib.nbar_max)


def noisy_allxy_error(result: AllXYResult, sigma_e: float, rng: np.random.Generator) -> float:
    return allxy_error(result) + float(rng.normal(0.0, sigma_e))
