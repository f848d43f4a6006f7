import numpy as np
import pytest

from cfmcast.scenario import Grouping


def crandn(rng, *shape, scale=1.0):
    """Circular complex Gaussian samples with variance ``scale``."""
    return np.sqrt(scale / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def relerr(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def small_instance(rng, B=2, M=2, K=4, N=2, G=2, scale=1.0):
    h = crandn(rng, B, K, M, N, scale=scale)
    grouping = Grouping.from_labels(np.arange(K) % G)
    v = crandn(rng, K, N)
    w = crandn(rng, B, G, M)
    return h, grouping, v, w


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> bool:
    """Record the one-line verdict of an acceptance criterion."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
