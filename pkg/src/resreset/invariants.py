"""Fast self-checks of every module, run by ``resreset validate``.

Each check returns ``(ok, detail)``; none of them takes more than a second
or two on the shipped device values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import DeviceParams, PulseSequence, TonePulse, dump_config, load_config, default_params


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _config_roundtrip(p: DeviceParams):
    cfg = load_config()
    from .params import _parse_text
    again = _parse_text(dump_config(cfg.values), "<dump>", strict=True)
    return again.values == cfg.values, f"{len(cfg.values)} keys"


def _linear_cavity(p: DeviceParams):
    from .cavity import analytic_linear_field, evolve_field
    tone = TonePulse.at_frequency(0.5 * (p.f_r0 + p.f_r1), 0.0, 300e-9, 5e7, 0.0, p)
    seq = PulseSequence((tone,), 1e-6)
    tr = evolve_field(seq, 1, p, t_end=1e-6)
    ref = analytic_linear_field(seq, 1, p, tr.t)
    err = float(np.max(np.abs(tr.alpha - ref)) / np.max(np.abs(ref)))
    return err < 1e-6, f"max relative error {err:.2e}"


def _kerr_free_decay(p: DeviceParams):
    from .cavity import evolve_field
    q = p.with_updates(kerr=-2 * math.pi * 5e3)
    tr = evolve_field(PulseSequence((), 1e-6), 0, q, init=2.0 + 0j, t_end=1e-6)
    ref = 4.0 * np.exp(-q.kappa * tr.t)
    err = float(np.max(np.abs(tr.nbar - ref) / ref))
    return err < 1e-6, f"photon decay stays exponential with Kerr ({err:.1e})"


def _allxy_staircase(p: DeviceParams):
    from .qubit import allxy_ideal, run_allxy
    ideal = p.with_updates(T1=math.inf, T2echo=math.inf)
    res = run_allxy(0, None, 0.0, ideal)
    err = float(np.max(np.abs(res.f1 - allxy_ideal(0))))
    return err < 1e-9, f"max deviation from staircase {err:.1e}"


def _relaxation(p: DeviceParams):
    from .qubit import RHO1, evolve_qubit
    rho = evolve_qubit(RHO1, p.T1, p)
    err = abs(rho[1, 1].real - math.exp(-1))
    return err < 1e-9, f"|1> population after T1 off by {err:.1e}"


def _assignment_arithmetic(p: DeviceParams):
    from .readout import fa_from_errors
    fa = fa_from_errors(0.001, 0.023)
    return abs(fa - 0.988) < 1e-15, f"F_a = {fa:.15g}"


def _overlap_oracle(p: DeviceParams):
    from scipy.special import erfc
    from .readout import normal_overlap
    worst = 0.0
    for d in (1.0, 3.0, 6.0):
        worst = max(worst, abs(normal_overlap(0, 1, d, 1) - erfc(d / (2 * math.sqrt(2)))))
    return worst < 1e-12, f"max |overlap - erfc| {worst:.1e}"


def _powell_quadratic(p: DeviceParams):
    from .powell import OptimizerOptions, minimize
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    res = minimize(lambda x: float(x @ a @ x), OptimizerOptions(x0=[1.0, -2.0]))
    at_two = [np.max(np.abs(pt)) for it, _, _, pt in res.trace if it == 2]
    ok = bool(at_two and at_two[0] < 1e-6)
    return ok, f"|x| after 2 iterations {at_two[0] if at_two else math.nan:.1e}"


def _depletion_oracle(p: DeviceParams):
    from .depletion import ResidualEvaluator, linear_oracle_unconditional
    from .readout import ReadoutConfig, measurement_tone
    cfg = ReadoutConfig.from_values(load_config().section("readout"), p)
    ev = ResidualEvaluator(measurement_tone(cfg, p), p)
    pulse = linear_oracle_unconditional(ev.measurement, 330e-9, p)
    n0, n1 = ev.unconditional(pulse, 330e-9)
    return max(n0, n1) < 1e-8, f"residual after oracle pulse {max(n0, n1):.1e}"


def _rte_geometric(p: DeviceParams):
    from .qec import CycleConfig, rte_exact
    st = rte_exact(CycleConfig(F_d=0.999), p.with_updates(T1=math.inf, T2echo=math.inf))
    return abs(st.rte - 1000) < 1e-6 and st.conservation_error < 1e-12, \
        f"RTE {st.rte:.9g}, conservation {st.conservation_error:.1e}"


def _classification(p: DeviceParams):
    from .qec import classify_event
    # flipping ideal record is 0,1,0,1,0,...
    cases = [([0, 1, 0, 0, 0], "flipping", (4, "d")), ([0, 1, 0, 0, 1], "flipping", (4, "s")),
             ([0, 0, 1, 1], "nonflipping_0", (3, "s")), ([0, 1, 0], "nonflipping_0", (2, "d"))]
    bad = [c for c in cases if tuple(vars(classify_event(c[0], c[1])).values()) != c[2]]
    return not bad, f"{len(cases) - len(bad)}/{len(cases)} traces"


def _echo_symmetry(p: DeviceParams):
    from .qec import ECHO_WINDOW, stark_phase

    class Sym:
        nbar_max = 0.0

        def dephasing_at(self, s):
            return np.zeros_like(np.asarray(s, dtype=float))

        def stark_at(self, s):
            x = np.asarray(s, dtype=float) - 0.5 * ECHO_WINDOW
            return 1e7 * np.exp(-(x / 30e-9) ** 2)

    phi = stark_phase(Sym())
    return abs(phi) < 1e-9, f"phi_Stark = {phi:.1e}"


def _zero_photon_reduction(p: DeviceParams):
    from .qec import ALL_KEYS, CycleConfig, ZeroEnvelope, extensive_model_cycle, projector, \
        simple_model_cycle
    cfg = CycleConfig(model="extensive", tau_d=500e-9)
    worst = 0.0
    for key in ALL_KEYS:
        a = simple_model_cycle({key: projector(key[2])}, cfg, p)
        b = extensive_model_cycle({key: projector(key[2])}, cfg, p, ZeroEnvelope(p))
        worst = max([worst] + [float(np.max(np.abs(a[k] - b[k]))) for k in a])
    return worst < 1e-12, f"max branch difference {worst:.1e}"


CHECKS: dict[str, Callable[[DeviceParams], tuple[bool, str]]] = {
    "config_roundtrip": _config_roundtrip,
    "linear_cavity_oracle": _linear_cavity,
    "kerr_free_decay": _kerr_free_decay,
    "allxy_staircase": _allxy_staircase,
    "t1_relaxation": _relaxation,
    "assignment_arithmetic": _assignment_arithmetic,
    "overlap_oracle": _overlap_oracle,
    "powell_quadratic": _powell_quadratic,
    "depletion_linear_oracle": _depletion_oracle,
    "rte_geometric": _rte_geometric,
    "event_classification": _classification,
    "echo_symmetry": _echo_symmetry,
    "zero_photon_reduction": _zero_photon_reduction,
}


def run_all(params: DeviceParams | None = None) -> list[CheckResult]:
    p = params if params is not None else default_params()
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(p)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
