"""Shared fixtures and helpers for the test suite."""

import os

import numpy as np
import pytest

# Directory holding the four canonical MNIST IDX files.  Tests that need the
# real dataset skip cleanly when it is absent.
MNIST_CANDIDATES = [
    os.environ.get("SPLINECNN_MNIST_DIR"),
    os.path.join(os.path.dirname(__file__), "..", "data", "mnist"),
    os.path.expanduser("~/data/mnist"),
]


def mnist_dir():
    for cand in MNIST_CANDIDATES:
        if cand and os.path.isfile(os.path.join(cand, "train-images-idx3-ubyte")):
            return cand
    return None


requires_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="MNIST IDX files not found (set SPLINECNN_MNIST_DIR)")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def finite_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def pytest_terminal_summary(terminalreporter):
    """Surface the acceptance gate's one-line-per-criterion verdicts."""
    try:
        from test_acceptance import GATE_LINES
    except ImportError:
        return
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
