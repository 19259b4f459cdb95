import math

import pytest
from hypothesis import given, settings, strategies as st

from resreset.errors import ConfigError, InconsistentChi, InvalidPulse, MissingKey, NegativeRate
from resreset.params import (KERR_TEST_VALUE, PulseSequence, TonePulse, derive_params,
                             dump_config, load_config, n_crit_direct, default_params)
from resreset.params import _parse_text


def test_shipped_values(params):
    assert params.kappa_inv == 250e-9
    assert params.T1 == 25e-6 and params.T2echo == 39e-6
    assert params.tau_r == 300e-9 and params.latency_feedback == 330e-9


def test_chi_from_resonator_pair(params):
    # chi/pi = f_r1 - f_r0 = -2.6 MHz
    assert params.chi == pytest.approx(math.pi * (6.8480e9 - 6.8506e9), rel=1e-12)
    assert params.chi / math.pi == pytest.approx(-2.6e6, rel=1e-9)


def test_rates(params):
    assert params.gamma1 == pytest.approx(1 / 25e-6)
    # 1/T2echo = gamma1/2 + gamma_phi
    assert params.gamma_phi == pytest.approx(1 / 39e-6 - 0.5 / 25e-6)


def test_critical_photon_number(params):
    assert params.n_crit == pytest.approx(n_crit_direct(params.f_q, params.f_r0, params.f_bare))
    assert params.n_crit == pytest.approx(33, abs=0.5)


def test_missing_key():
    raw = default_params().to_raw()
    del raw["T1"]
    with pytest.raises(MissingKey) as exc:
        derive_params(raw)
    assert exc.value.key_path == "T1"


def test_negative_dephasing_rate():
    raw = dict(default_params().to_raw(), T2echo=60e-6)
    with pytest.raises(NegativeRate) as exc:
        derive_params(raw)
    assert exc.value.key_path == "T2echo"


def test_non_positive_time():
    raw = dict(default_params().to_raw(), T1=-1.0)
    with pytest.raises(ConfigError) as exc:
        derive_params(raw)
    assert exc.value.key_path == "T1"


def test_inconsistent_chi():
    raw = dict(default_params().to_raw(), chi_over_pi=-3.0e6)
    with pytest.raises(InconsistentChi):
        derive_params(raw)


def test_infinite_times_are_ideal():
    p = default_params(T1=math.inf, T2echo=math.inf)
    assert p.gamma1 == 0 and p.gamma_phi == 0


def test_unknown_keys_warn_or_fail():
    text = "[device]\nf_q = 1\nbogus = 2\n[extra]\nx = 1\n"
    cfg = _parse_text(text, "t", strict=False)
    assert len(cfg.warnings) == 2 and "bogus" not in cfg.values
    with pytest.raises(ConfigError):
        _parse_text(text, "t", strict=True)


def test_non_numeric_value_has_key_path():
    with pytest.raises(ConfigError) as exc:
        _parse_text("[timing]\ntau_r = soon\n", "t", strict=False)
    assert exc.value.key_path == "timing.tau_r"


def test_load_dump_roundtrip():
    cfg = load_config()
    again = _parse_text(dump_config(cfg.values), "d", strict=True)
    assert again.values == cfg.values


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-7, 1e-3), st.floats(1e-7, 1e-3), st.floats(-1e6, 1e6))
def test_dump_roundtrip_is_exact(t1, kinv, kerr):
    vals = dict(load_config().values, T1=t1, kappa_inv=kinv, kerr=kerr)
    assert _parse_text(dump_config(vals), "d", strict=True).values == vals


def test_kerr_test_value_is_negative_and_small(params):
    # a few kHz, far below kappa
    assert KERR_TEST_VALUE < 0 and abs(KERR_TEST_VALUE) < 0.01 * params.kappa


def test_pulse_validation():
    with pytest.raises(InvalidPulse):
        TonePulse(2e-9, 1e-9, 1.0)
    with pytest.raises(InvalidPulse):
        TonePulse(0.0, 1e-9, math.nan)


def test_sequence_duration_covers_tones():
    seq = PulseSequence((TonePulse(0.0, 5e-7, 1.0),), 1e-7)
    assert seq.total_duration == 5e-7
