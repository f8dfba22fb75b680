import numpy as np
import pytest

from slamim.camera import CameraIntrinsics


@pytest.fixture
def intr():
    return CameraIntrinsics(fx=250.0, fy=260.0, cx=320.0, cy=240.0, xi=0.8, width=640, height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_GATE: dict = {}


@pytest.fixture(scope="session")
def gate():
    """Record one pass/fail line per acceptance criterion; returns the pass flag."""

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _GATE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _GATE:
        terminalreporter.section("acceptance gate")
        for n in sorted(_GATE):
            terminalreporter.write_line(_GATE[n])
