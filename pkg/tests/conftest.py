import numpy as np
import pytest
from hypothesis import settings

from stochwave import CovarianceSpec, Grid, InitialData, SolverConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid16():
    return Grid(8.0, 16)


@pytest.fixture(scope="session")
def additive16(grid16):
    """beta = 1, sigma = 1, b = 0 on 16^3, T = 1, J = 64."""
    return SolverConfig(grid16, 1.0, 64, InitialData.zeros(grid16), CovarianceSpec(1.0))


def single_mode(grid, kx=1, ky=0, kz=0, amp=1.0):
    z, y, x = grid.coords()
    phase = 2 * np.pi * (kx * x + ky * y + kz * z) / grid.L
    return amp * np.cos(phase) * np.ones(grid.shape)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line; the session summary repeats them in order."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
