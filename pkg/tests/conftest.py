import math
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from semidisperse.geometry import pocket_square, sinai, unit_square

warnings.filterwarnings("ignore", message=".*TBB.*")

# compiled kernels make the first example slow; deadlines only add flakiness
settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion, title, passed, detail) rows filled by test_acceptance
ACCEPTANCE = []

PERIOD2_R = 0.0          # disk point facing +x on the Sinai table
SINAI_DISK_LEN = 2 * math.pi * 0.4


@pytest.fixture(scope="session")
def square():
    return unit_square()


@pytest.fixture(scope="session")
def sinai_table():
    return sinai()


@pytest.fixture(scope="session")
def pocket():
    return pocket_square()


@pytest.fixture(scope="session")
def tables(square, sinai_table, pocket):
    return {"square": square, "sinai": sinai_table, "pocket": pocket}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: criterion-level acceptance checks")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {title}: {detail}")
