import math

import numpy as np
import pytest
import sympy as sp

from resreset.errors import (
    EnvelopeMissing, InvalidBranchWeights, NoEvent, NonConvergent, PhotonRegimeViolation,
    TruncatedAfterEvent,
)
from resreset.qec import (
    ALL_KEYS, ECHO_WINDOW, CycleConfig, ExponentialWindow, FunctionEnvelope, ZeroEnvelope,
    _half_exponent, classify_event, coherent_step, curve_maximum, cycle, echo_exponents,
    extensive_model_cycle, ideal_sequence, nonflipping0_event_probability, nonflipping0_rte_chain,
    quoted_envelope, passive_amplitudes, projector, read_raw_traces, rte_exact, rte_monte_carlo,
    simple_model_cycle, stark_phase, sweep_tau_d, transition_kernel, write_curves_csv,
    write_raw_traces,
)


# ------------------------------------------------------------ classification

def test_ideal_sequences():
    assert list(ideal_sequence("flipping", 5)) == [0, 1, 0, 1, 0]
    assert list(ideal_sequence("nonflipping_0", 3)) == [0, 0, 0]
    assert list(ideal_sequence("nonflipping_1", 3)) == [1, 1, 1]


@pytest.mark.parametrize("variant, trace, expected", [
    # single misreading: the next round is back on the ideal record
    ("flipping", [0, 1, 0, 0, 0], (4, "d")),
    ("nonflipping_0", [0, 0, 1, 0], (3, "d")),
    ("nonflipping_1", [1, 0, 1], (2, "d")),
    # a bit flip shifts every later outcome onto the complement
    ("flipping", [0, 1, 0, 0, 1], (4, "s")),
    ("nonflipping_0", [0, 0, 1, 1], (3, "s")),
    ("nonflipping_1", [1, 1, 0, 0], (3, "s")),
    # event in the very first round
    ("flipping", [1, 1], (1, "d")),
    ("flipping", [1, 0], (1, "s")),
])
def test_classify_event(variant, trace, expected):
    ev = classify_event(trace, variant)
    assert (ev.rounds_to_event, ev.event_type) == expected


def test_classify_errors():
    with pytest.raises(NoEvent):
        classify_event([0, 1, 0, 1], "flipping")
    with pytest.raises(TruncatedAfterEvent):
        classify_event([0, 0, 1], "nonflipping_0")


def test_config_validation():
    for bad in (dict(variant="x"), dict(model="x"), dict(F_d=1.5), dict(tau_d=-1.0),
                dict(high_photon="x")):
        with pytest.raises(ValueError):
            CycleConfig(**bad)
    c = CycleConfig(tau_d=1e-6)
    assert c.cycle_time == pytest.approx(1e-6 + 200e-9 + 300e-9)


# ------------------------------------------------------------ simple model

def test_noiseless_flipping_is_deterministic(ideal_params):
    cfg = CycleConfig("flipping", F_d=1.0)
    branches = {cfg.initial_key: projector(1)}
    for k in range(1, 7):
        branches = simple_model_cycle(branches, cfg, ideal_params)
        weights = {key: np.trace(m).real for key, m in branches.items()}
        assert weights.pop((cfg.ideal(k),) * 3) == pytest.approx(1.0, abs=1e-14)
        assert all(w < 1e-14 for w in weights.values())


@pytest.mark.parametrize("variant", ["flipping", "nonflipping_0", "nonflipping_1"])
def test_readout_error_only_gives_geometric_events(variant, ideal_params):
    st = rte_exact(CycleConfig(variant, F_d=0.999), ideal_params)
    assert st.rte == pytest.approx(1000.0, rel=1e-9)
    k = np.arange(1, 51)
    assert np.allclose(st.event_distribution[:50], 0.001 * 0.999 ** (k - 1), rtol=1e-9)
    # no bit ever flips; only a second misreading in the classifying round looks like s
    assert st.p_d == pytest.approx(0.999e-3, rel=1e-9)
    assert st.p_s == pytest.approx(1e-6, rel=1e-6)
    assert st.conservation_error < 1e-12


def test_kernel_rows_conserve_probability(params):
    for variant in ("flipping", "nonflipping_0"):
        kern = transition_kernel(CycleConfig(variant, tau_d=700e-9), params)
        assert set(kern) == set(ALL_KEYS)
        for row in kern.values():
            assert sum(row.values()) == pytest.approx(1.0, abs=1e-13)
            assert all(p >= 0 for p in row.values())


def test_invalid_branches(params):
    cfg = CycleConfig()
    with pytest.raises(InvalidBranchWeights):
        simple_model_cycle({(0, 0, 0): projector(0, 0.7), (1, 1, 1): projector(1, 0.7)}, cfg, params)
    with pytest.raises(InvalidBranchWeights):
        simple_model_cycle({(0, 0, 0): projector(0, -0.1)}, cfg, params)
    with pytest.raises(InvalidBranchWeights):
        simple_model_cycle({(0, 0, 0): np.array([[0.5, 0.3], [0.1, 0.5]])}, cfg, params)


def test_t1_dominates_flipping_rte(params):
    rtes = [rte_exact(CycleConfig("flipping", tau_d=t), params).rte
            for t in (0.5e-6, 1.5e-6, 3e-6, 6e-6)]
    assert all(a > b for a, b in zip(rtes, rtes[1:]))


def test_nonflipping0_closed_form_and_chain(params):
    cfg = CycleConfig("nonflipping_0", tau_d=2.2e-6)
    p = nonflipping0_event_probability(cfg, params)
    st = rte_exact(cfg, params)
    assert st.rte == pytest.approx(nonflipping0_rte_chain(cfg, params), rel=1e-6)
    # the undetected |1> branch is tiny, so the chain is nearly geometric
    assert st.rte == pytest.approx(1 / p, rel=5e-3)
    # at very long tau_d every round restarts in |0>
    long = CycleConfig("nonflipping_0", tau_d=1e-3)
    assert rte_exact(long, params).rte == pytest.approx(
        1 / nonflipping0_event_probability(long, params), rel=1e-6)


# ------------------------------------------------------------ Monte Carlo

def test_monte_carlo_agrees_with_exact(params):
    cfg = CycleConfig("flipping", tau_d=1e-6)
    ex = rte_exact(cfg, params)
    mc = rte_monte_carlo(cfg, params, n_traces=100_000, seed=11)
    assert not mc.censored
    assert abs(mc.rte - ex.rte) < 3 * mc.rte_err
    assert abs(mc.p_s - ex.p_s) < 3 * mc.p_s_err + 1e-12
    assert abs(mc.p_d - ex.p_d) < 3 * mc.p_d_err + 1e-12


def test_monte_carlo_poor_readout(ideal_params):
    mc = rte_monte_carlo(CycleConfig("nonflipping_1", F_d=0.9), ideal_params, n_traces=20_000, seed=2)
    assert abs(mc.rte - 10.0) < 3 * mc.rte_err


def test_monte_carlo_worker_invariant(params):
    cfg = CycleConfig("flipping", tau_d=1e-6)
    a = rte_monte_carlo(cfg, params, n_traces=25_000, seed=4, workers=1)
    b = rte_monte_carlo(cfg, params, n_traces=25_000, seed=4, workers=3)
    assert (a.rte, a.p_s, a.p_d) == (b.rte, b.p_s, b.p_d)


def test_censoring_without_errors(ideal_params):
    cfg = CycleConfig("flipping", F_d=1.0)
    mc = rte_monte_carlo(cfg, ideal_params, n_traces=100, max_rounds=50, seed=0)
    assert mc.censored and mc.n_censored == 100
    assert math.isnan(mc.rte) and mc.rte_lower_bound == 50
    with pytest.raises(NonConvergent):
        rte_exact(cfg, ideal_params)


def test_raw_traces_classify_consistently(tmp_path, params):
    cfg = CycleConfig("flipping", tau_d=1e-6)
    mc = rte_monte_carlo(cfg, params, n_traces=2000, seed=9, raw_traces=40)
    path = write_raw_traces(tmp_path / "raw.txt", mc.raw_traces, cfg.variant, 9, "abc")
    assert path.read_text().startswith("# variant=flipping seed=9 params_hash=abc")
    traces = read_raw_traces(path)
    assert traces == mc.raw_traces and len(traces) == 40
    for tr in traces:
        # each raw record ends one round after its event
        assert classify_event(tr, cfg.variant).rounds_to_event == len(tr) - 1


# ------------------------------------------------------------ extensive model

def test_dephasing_integral_matches_closed_form(params):
    w = ExponentialWindow(3.0, params.kappa, params.chi)
    s = sp.symbols("s", real=True)
    n0, kap, chi, T = sp.Rational(3), sp.nsimplify(params.kappa), sp.nsimplify(params.chi), \
        sp.nsimplify(ECHO_WINDOW)
    cross = n0 * sp.exp(-kap * s)
    first = sp.integrate(2 * chi * cross * sp.sin(2 * chi * s), (s, 0, T / 2))
    second = sp.integrate(2 * chi * cross * sp.sin(2 * chi * (s - T)), (s, T / 2, T))
    ea, eb = echo_exponents(w)
    assert ea.real == pytest.approx(float(first), rel=1e-8)
    assert eb.real == pytest.approx(float(second), rel=1e-8)
    stark = sp.integrate(2 * chi * cross * sp.cos(2 * chi * s), (s, 0, T / 2))
    assert ea.imag == pytest.approx(float(stark), rel=1e-8)


def test_quadrature_of_polynomial_is_exact():
    class Poly:
        def dephasing_at(self, s):
            return 1e15 * np.asarray(s) ** 3

        def stark_at(self, s):
            return np.zeros_like(np.asarray(s, dtype=float))

    assert _half_exponent(Poly(), 0.0, 80e-9).real == pytest.approx(1e15 * 80e-9 ** 4 / 4, rel=1e-12)


def test_symmetric_stark_shift_is_echoed():
    class Sym:
        nbar_max = 0.0

        def dephasing_at(self, s):
            return np.zeros_like(np.asarray(s, dtype=float))

        def stark_at(self, s):
            return 5e6 * np.cos(2 * np.pi * (np.asarray(s) - ECHO_WINDOW / 2) / ECHO_WINDOW)

    assert abs(stark_phase(Sym())) < 1e-10


@pytest.mark.parametrize("variant", ["flipping", "nonflipping_0", "nonflipping_1"])
def test_zero_photons_reduce_to_simple_model(variant, params):
    cfg = CycleConfig(variant, tau_d=600e-9, model="extensive")
    for key in ALL_KEYS:
        a = simple_model_cycle({key: projector(key[2])}, cfg, params)
        b = extensive_model_cycle({key: projector(key[2])}, cfg, params, ZeroEnvelope(params))
        assert set(a) == set(b)
        for k in a:
            assert np.max(np.abs(a[k] - b[k])) < 1e-12
    assert rte_exact(cfg, params, ZeroEnvelope(params)).rte == pytest.approx(
        rte_exact(CycleConfig(variant, tau_d=600e-9), params).rte, rel=1e-12)


def test_photons_shorten_rte(params):
    cfg = CycleConfig("flipping", tau_d=1.2e-6, model="extensive")
    env = FunctionEnvelope(lambda i, d, t: 2.0, params)
    assert rte_exact(cfg, params, env).rte < rte_exact(cfg, params, ZeroEnvelope(params)).rte


def test_extensive_errors(params):
    cfg = CycleConfig("nonflipping_1", tau_d=100e-9, model="extensive")
    with pytest.raises(EnvelopeMissing):
        cycle({(1, 1, 1): projector(1)}, cfg, params, None)
    missing = FunctionEnvelope(lambda i, d, t: {(1, 1): 0.1}[(i, d)], params)
    with pytest.raises(EnvelopeMissing):
        cycle({(0, 0, 0): projector(0)}, cfg, params, missing)
    big = FunctionEnvelope(lambda i, d, t: 20.0, params)
    with pytest.raises(PhotonRegimeViolation):
        cycle({(1, 1, 1): projector(1)}, cfg, params, big)


def test_detuned_pulses_policy_runs(params):
    cfg = CycleConfig("nonflipping_1", tau_d=100e-9, model="extensive", high_photon="detuned_pulses")
    big = FunctionEnvelope(lambda i, d, t: 20.0, params)
    out = cycle({(1, 1, 1): projector(1)}, cfg, params, big)
    assert sum(np.trace(m).real for m in out.values()) == pytest.approx(1.0, abs=1e-10)
    st = rte_exact(cfg, params, big)
    assert 1 < st.rte < rte_exact(CycleConfig("nonflipping_1", tau_d=100e-9), params).rte


def test_coherent_step_keeps_valid_state(params):
    cfg = CycleConfig("flipping", tau_d=300e-9)
    w = ExponentialWindow(6.0, params.kappa, params.chi)
    for s in (0, 1):
        r = coherent_step(projector(s), cfg, params, w)
        assert np.trace(r).real == pytest.approx(1.0, abs=1e-13)
        assert np.min(np.linalg.eigvalsh(r)) > -1e-13


# ------------------------------------------------------------ envelopes and sweeps

def test_quoted_envelope_anchors(params):
    un = quoted_envelope("unconditional", params)
    assert (un.nbar(0, 0, 400e-9), un.nbar(1, 1, 400e-9)) == pytest.approx((0.8, 0.4))
    co = quoted_envelope("conditional", params)
    assert (co.nbar(0, 0, 500e-9), co.nbar(1, 1, 500e-9)) == pytest.approx((2.1, 0.7))
    pas = quoted_envelope("passive", params)
    a0, a1 = passive_amplitudes(params.kappa_inv)
    assert pas.nbar(1, 1, 0.0) == pytest.approx(a1)
    # a wrong conditional declaration sees the passive field
    assert co.nbar(1, 0, 800e-9) == pytest.approx(pas.nbar(1, 0, 800e-9))
    # passive needs at least the quoted extra waiting to reach each active level
    assert pas.nbar(0, 0, 400e-9 + 1650e-9) >= 0.8 - 1e-12
    assert pas.nbar(1, 1, 500e-9 + 1790e-9) >= 0.7 - 1e-12
    with pytest.raises(ValueError):
        quoted_envelope("bogus", params)


def test_sweep_marks_maximum_and_invalid_points(tmp_path, params):
    taus = [0.2e-6, 1.0e-6, 2.7e-6, 4.0e-6]
    envs = {"passive": quoted_envelope("passive", params),
            "unconditional": quoted_envelope("unconditional", params)}
    rows = sweep_tau_d(CycleConfig("flipping", model="extensive"), taus, params, envs)
    pas = [r for r in rows if r["scheme"] == "passive"]
    assert not pas[0]["valid"] and math.isnan(pas[0]["RTE"])
    t_best, rte_best = curve_maximum(rows, "passive")
    assert t_best == 2.7e-6
    _, rte_unc = curve_maximum(rows, "unconditional")
    assert rte_unc > rte_best
    assert sum(r["optimal"] for r in rows) == 2
    p = write_curves_csv(tmp_path / "c.csv", rows, header="manifest: h")
    lines = p.read_text().splitlines()
    assert lines[0] == "# manifest: h"
    assert lines[1] == "tau_d,scheme,model,RTE,RTE_err,p_s,p_d,optimal"
    assert len(lines) == 2 + len(rows)
