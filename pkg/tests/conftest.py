import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rwre import EnvironmentModel, Deterministic, DirichletSites, biased, srw

settings.register_profile("rwre", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rwre")


@pytest.fixture
def biased2():
    """Deterministic kernel (0.4, 0.2, 0.2, 0.2) in d=2."""
    return biased(2)


@pytest.fixture
def srw2():
    return srw(2)


@pytest.fixture
def dirichlet2():
    return EnvironmentModel(2, 0.05, DirichletSites((1.0, 1.0, 1.0, 1.0)))


def right_only(d=2):
    """Test-mode kernel that always steps +e_1."""
    k = [0.0] * (2 * d)
    k[0] = 1.0
    return EnvironmentModel(d, 0.0, Deterministic(k), test_mode=True)


def always(d, index):
    k = [0.0] * (2 * d)
    k[index] = 1.0
    return EnvironmentModel(d, 0.0, Deterministic(k), test_mode=True)


_ACCEPTANCE = {}


def record_acceptance(n: int, ok: bool, detail: str):
    _ACCEPTANCE[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
