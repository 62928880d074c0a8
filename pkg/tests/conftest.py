import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rstt.autograd import precision

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# criterion number -> (name, passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}")
