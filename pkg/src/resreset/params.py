"""Device constants, unit conventions and pulse containers.

Conventions used everywhere in the package:

* frequencies are in Hz (``f_*``), angular rates in rad/s, times in s;
* the cavity rotating frame is the bare resonator frequency ``f_bare``;
* ``chi`` is the dispersive half-shift, so ``2*chi`` is the angular shift of
  the resonator (and of the qubit) per unit of excitation. With the device
  frequencies, ``chi / pi == f_r1 - f_r0`` (negative for this device).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError, InconsistentChi, InvalidPulse, MissingKey, NegativeRate

TWO_PI = 2.0 * math.pi

# section -> keys understood by the loader
CONFIG_SCHEMA: dict[str, dict[str, str]] = {
    "device": {
        "f_q": "qubit transition frequency [Hz]",
        "f_r0": "resonator fundamental, qubit in |0> [Hz]",
        "f_r1": "resonator fundamental, qubit in |1> [Hz]",
        "f_bare": "bare resonator frequency [Hz]",
        "kappa_inv": "resonator photon lifetime 1/kappa [s]",
        "chi_over_pi": "optional cross-check of chi/pi [Hz]",
        "kerr": "self-Kerr coefficient K [rad/s per photon]",
        "T1": "qubit relaxation time [s]",
        "T2echo": "Hahn-echo dephasing time [s]",
    },
    "timing": {
        "tau_r": "measurement pulse duration [s]",
        "tau_int": "integration window [s]",
        "latency_feedback": "conditional pulse delay after measurement end [s]",
    },
    "readout": {
        "f_rf": "measurement tone frequency [Hz]",
        "drive_amplitude": "measurement drive amplitude epsilon [rad/s]",
        "noise_sigma": "homodyne noise per 1 ns sample",
        "t1_decay": "model T1 jumps during readout (0/1)",
    },
    "qec": {
        "F_d": "readout discrimination fidelity",
    },
}

REQUIRED_DEVICE_KEYS = (
    "f_q", "f_r0", "f_r1", "f_bare", "kappa_inv", "T1", "T2echo",
    "tau_r", "tau_int", "latency_feedback",
)

# Artifact-chosen nonlinear test value (not a device number): K/2pi = -5 kHz.
KERR_TEST_VALUE = -TWO_PI * 5.0e3

CHI_REL_TOL = 1e-9


@dataclass(frozen=True)
class DeviceParams:
    f_q: float
    f_r0: float
    f_r1: float
    f_bare: float
    kappa_inv: float
    chi: float
    g: float
    kerr: float
    T1: float
    T2echo: float
    gamma1: float
    gamma_phi: float
    tau_r: float
    tau_int: float
    latency_feedback: float
    n_crit: float

    @property
    def kappa(self) -> float:
        return 1.0 / self.kappa_inv

    @property
    def delta(self) -> float:
        """Qubit-resonator detuning 2pi(f_q - f_bare) [rad/s]."""
        return TWO_PI * (self.f_q - self.f_bare)

    def cavity_detuning(self, qubit_state: int) -> float:
        """Angular offset of the state-dependent fundamental from the frame [rad/s]."""
        f = self.f_r0 if qubit_state == 0 else self.f_r1
        return TWO_PI * (f - self.f_bare)

    def tone_detuning(self, frequency: float) -> float:
        """Frame detuning of a tone at ``frequency`` [rad/s]."""
        return TWO_PI * (frequency - self.f_bare)

    def resonator_frequency(self, qubit_state: int) -> float:
        return self.f_r0 if qubit_state == 0 else self.f_r1

    def to_raw(self) -> dict[str, float]:
        """Inputs that :func:`derive_params` needs to rebuild this object."""
        return {
            "f_q": self.f_q, "f_r0": self.f_r0, "f_r1": self.f_r1, "f_bare": self.f_bare,
            "kappa_inv": self.kappa_inv, "kerr": self.kerr,
            "T1": self.T1, "T2echo": self.T2echo,
            "tau_r": self.tau_r, "tau_int": self.tau_int,
            "latency_feedback": self.latency_feedback,
        }

    def with_updates(self, **raw) -> "DeviceParams":
        """Re-derive with some raw inputs replaced (derived fields recomputed)."""
        merged = self.to_raw()
        merged.update(raw)
        return derive_params(merged)


def _number(raw: Mapping, key: str) -> float:
    if key not in raw:
        raise MissingKey("required key missing", key)
    try:
        return float(raw[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a number: {raw[key]!r}", key) from exc


def n_crit_direct(f_q: float, f_r0: float, f_bare: float) -> float:
    """Critical photon number without going through g: |f_q - f_bare| / (4 |f_r0 - f_bare|)."""
    return abs(f_q - f_bare) / (4.0 * abs(f_r0 - f_bare))


def derive_params(raw: Mapping[str, object]) -> DeviceParams:
    """Validate raw inputs and fill in every derived quantity.

    ``T1``/``T2echo`` may be ``inf`` to switch a decoherence channel off.
    """
    vals = {k: _number(raw, k) for k in REQUIRED_DEVICE_KEYS}
    kerr = float(raw.get("kerr", 0.0))

    for key in ("kappa_inv", "T1", "T2echo", "tau_r", "tau_int"):
        if not vals[key] > 0:
            raise ConfigError("must be strictly positive", key)
    if vals["latency_feedback"] < 0:
        raise ConfigError("must be non-negative", "latency_feedback")
    for key in ("f_q", "f_r0", "f_r1", "f_bare"):
        if not (vals[key] > 0 and math.isfinite(vals[key])):
            raise ConfigError("must be a positive finite frequency", key)

    gamma1 = 1.0 / vals["T1"]
    gamma_phi = 1.0 / vals["T2echo"] - 0.5 * gamma1
    if gamma_phi < 0:
        # tolerate round-off at T2echo == 2*T1
        if gamma_phi > -1e-12 * (1.0 / vals["T2echo"]):
            gamma_phi = 0.0
        else:
            raise NegativeRate(
                f"T2echo={vals['T2echo']:g} s exceeds 2*T1={2 * vals['T1']:g} s", "T2echo")

    chi = math.pi * (vals["f_r1"] - vals["f_r0"])
    if "chi_over_pi" in raw and raw["chi_over_pi"] is not None:
        stored = float(raw["chi_over_pi"])
        ref = chi / math.pi
        if abs(stored - ref) > CHI_REL_TOL * max(abs(stored), abs(ref)):
            raise InconsistentChi(
                f"chi/pi={stored:g} Hz but f_r1-f_r0={ref:g} Hz", "chi_over_pi")

    f_pull = vals["f_r0"] - vals["f_bare"]
    delta = TWO_PI * (vals["f_q"] - vals["f_bare"])
    if f_pull == 0 or delta == 0:
        g = 0.0
        n_crit = math.inf
    else:
        # f_r0 - f_bare = g^2 / (2 pi Delta), magnitudes only
        g = math.sqrt(TWO_PI * abs(delta) * abs(f_pull))
        n_crit = delta**2 / (4.0 * g**2)

    return DeviceParams(
        f_q=vals["f_q"], f_r0=vals["f_r0"], f_r1=vals["f_r1"], f_bare=vals["f_bare"],
        kappa_inv=vals["kappa_inv"], chi=chi, g=g, kerr=kerr,
        T1=vals["T1"], T2echo=vals["T2echo"], gamma1=gamma1, gamma_phi=gamma_phi,
        tau_r=vals["tau_r"], tau_int=vals["tau_int"],
        latency_feedback=vals["latency_feedback"], n_crit=n_crit,
    )


@dataclass
class LoadedConfig:
    values: dict[str, float]
    warnings: list[str] = field(default_factory=list)
    source: str = "<builtin>"

    def section(self, name: str) -> dict[str, float]:
        return {k: v for k, v in self.values.items() if k in CONFIG_SCHEMA[name]}


def _parse_text(text: str, source: str, strict: bool) -> LoadedConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep T1 / T2echo case
    parser.read_string(text, source=source)
    values: dict[str, float] = {}
    warnings: list[str] = []
    for section in parser.sections():
        known = CONFIG_SCHEMA.get(section)
        if known is None:
            warnings.append(f"unknown section [{section}] ignored")
            continue
        for key, raw in parser.items(section):
            if key not in known:
                warnings.append(f"unknown key {section}.{key} ignored")
                continue
            try:
                values[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"not a number: {raw!r}", f"{section}.{key}") from exc
    if strict and warnings:
        raise ConfigError("; ".join(warnings))
    return LoadedConfig(values, warnings, source)


def load_config(path: str | Path | None = None, strict: bool = False) -> LoadedConfig:
    """Read an INI-style config. ``None`` loads the shipped device file."""
    if path is None:
        text = resources.files("resreset.data").joinpath("device.cfg").read_text()
        return _parse_text(text, "device.cfg", strict)
    path = Path(path)
    return _parse_text(path.read_text(), str(path), strict)


def dump_config(values: Mapping[str, float]) -> str:
    """Serialize a flat value map back into the sectioned format (exact float repr)."""
    lines = []
    for section, keys in CONFIG_SCHEMA.items():
        present = [k for k in keys if k in values]
        if not present:
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {float(values[k])!r}" for k in present)
        lines.append("")
    return "\n".join(lines)


def default_params(**overrides) -> DeviceParams:
    """Shipped device values, optionally with raw overrides."""
    raw = load_config().values
    raw.update(overrides)
    return derive_params(raw)


@dataclass(frozen=True)
class TonePulse:
    """Square drive tone. ``detuning`` is relative to the f_bare frame [rad/s]."""

    t_start: float
    t_stop: float
    amplitude: float
    phase: float = 0.0
    detuning: float = 0.0

    def __post_init__(self):
        if not self.t_stop > self.t_start:
            raise InvalidPulse(f"t_stop={self.t_stop} must exceed t_start={self.t_start}")
        if not (self.amplitude >= 0 and math.isfinite(self.amplitude)):
            raise InvalidPulse("amplitude must be finite and non-negative")
        if not math.isfinite(self.phase):
            raise InvalidPulse("phase must be finite")
        wrapped = self.phase % TWO_PI
        if wrapped != self.phase:
            object.__setattr__(self, "phase", wrapped)

    @classmethod
    def at_frequency(cls, frequency: float, t_start: float, t_stop: float,
                     amplitude: float, phase: float, params: DeviceParams) -> "TonePulse":
        return cls(t_start, t_stop, amplitude, phase, params.tone_detuning(frequency))

    @classmethod
    def from_complex(cls, c: complex, t_start: float, t_stop: float, detuning: float) -> "TonePulse":
        return cls(t_start, t_stop, abs(c), math.atan2(c.imag, c.real), detuning)

    @property
    def complex_amplitude(self) -> complex:
        return self.amplitude * complex(math.cos(self.phase), math.sin(self.phase))

    def shifted_phase(self, dphi: float) -> "TonePulse":
        return replace(self, phase=self.phase + dphi)


@dataclass(frozen=True)
class PulseSequence:
    tones: tuple[TonePulse, ...] = ()
    total_duration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tones", tuple(self.tones))
        latest = max((p.t_stop for p in self.tones), default=0.0)
        if self.total_duration < latest:
            object.__setattr__(self, "total_duration", latest)

    def __add__(self, other: "PulseSequence") -> "PulseSequence":
        return PulseSequence(self.tones + other.tones,
                             max(self.total_duration, other.total_duration))

    def extended(self, total_duration: float) -> "PulseSequence":
        return PulseSequence(self.tones, max(total_duration, self.total_duration))

    def with_tones(self, tones: Iterable[TonePulse]) -> "PulseSequence":
        return PulseSequence(self.tones + tuple(tones), self.total_duration)


def raw_fields() -> list[str]:
    return [f.name for f in fields(DeviceParams)]
