import numpy as np
import pytest

from toda_disc.geometry import make_grid


@pytest.fixture
def small_grid():
    return make_grid(16, 32, 0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one verdict line per acceptance criterion for the terminal summary."""

    def _record(n, passed, detail):
        prev = ACCEPTANCE.get(n)
        ok = bool(passed) and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        ACCEPTANCE[n] = (ok, text)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
