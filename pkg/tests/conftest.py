"""Shared fixtures and finite-difference helpers."""

from pathlib import Path

import numpy as np
import pytest

TOY = Path(__file__).parent / "fixtures" / "toy"


@pytest.fixture
def toy_dir():
    return TOY


@pytest.fixture
def toy_dataset():
    from epitransport.data import load_dataset

    return load_dataset(TOY / "cases.csv", TOY / "mobility.csv", TOY / "centroids.csv")


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f()
        flat[i] = keep - step
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES[number] = f"criterion {number}: {status} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
