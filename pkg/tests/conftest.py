import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from angioatlas.phantom import phantom_lut, synth_atlas

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record a PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture(scope="session")
def small_atlas():
    return synth_atlas(32, 6, seed=1)


@pytest.fixture(scope="session")
def small_lut(small_atlas):
    return phantom_lut(small_atlas)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
