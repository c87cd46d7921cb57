import numpy as np
import pytest
from scipy import ndimage


def random_blob(rng, shape=(16, 16, 16), smooth=2.0, level=0.55):
    """Smooth random blob mask; never empty or full."""
    field = ndimage.gaussian_filter(rng.normal(size=shape), smooth)
    mask = field > np.quantile(field, level)
    return mask


def ball(shape, center, radius):
    grid = np.indices(shape, dtype=float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    return ((grid - c) ** 2).sum(axis=0) <= radius**2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list = []


@pytest.fixture
def accept():
    """Record one acceptance line, print it, then assert it."""

    def check(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
