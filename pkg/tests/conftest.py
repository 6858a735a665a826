import warnings

import numpy as np
import pytest

from fluidctl import environment as env


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_env():
    """2-DOF cylinder setup on a coarse grid for fast closed-loop tests."""
    return env.make_environment("BaseNR", {"resolution": 32})


@pytest.fixture(autouse=True)
def _quiet_stability():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the end-of-run acceptance summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        lines.append((number, f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
