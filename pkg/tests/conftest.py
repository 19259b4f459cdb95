import math
import sys

import pytest

from resreset.depletion import ResidualEvaluator
from resreset.params import load_config, default_params
from resreset.readout import ReadoutConfig, measurement_tone


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def ideal_params():
    return default_params(T1=math.inf, T2echo=math.inf)


@pytest.fixture(scope="session")
def readout_cfg(params):
    return ReadoutConfig.from_values(load_config().section("readout"), params)


@pytest.fixture(scope="session")
def evaluator(params, readout_cfg):
    return ResidualEvaluator(measurement_tone(readout_cfg, params), params)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
