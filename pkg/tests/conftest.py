import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ntnsync.waveform import PreambleConfig, gen_preamble

settings.register_profile("ntnsync", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ntnsync")

FS = 1.92e6


@pytest.fixture(scope="session")
def cfg8():
    return PreambleConfig(n_rep=8)


@pytest.fixture(scope="session")
def replica8(cfg8):
    return gen_preamble(cfg8)


def us(samples):
    return samples / FS * 1e6


def samples(us_):
    return us_ * 1e-6 * FS


def wrap(x):
    return np.mod(np.asarray(x) + math.pi, 2 * math.pi) - math.pi


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
