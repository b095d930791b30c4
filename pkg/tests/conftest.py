import numpy as np
import pytest

from ucfl.datagen import LabeledDataset, make_gaussian_blobs
from ucfl.numerics import RngStream


def rel_error(analytic, numeric, floor=1e-3):
    """Max per-coordinate relative error; coordinates smaller than ``floor`` compare absolutely."""
    a = np.asarray(analytic)
    f = np.asarray(numeric)
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


@pytest.fixture
def blobs():
    return make_gaussian_blobs(4, 2, 200, 0.3, RngStream(0, "fixture"))


@pytest.fixture
def tiny():
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    return LabeledDataset(X, np.array([0, 1, 0, 1]), 2)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance outcome for the end-of-session report."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
