import numpy as np
import pytest

from obtorus.mollifier import build_mollifier
from obtorus.spectral import Field, Grid


@pytest.fixture(scope="session")
def g16():
    return Grid(16, 16, 16)


@pytest.fixture(scope="session")
def g32():
    return Grid(32, 32, 32)


@pytest.fixture(scope="session")
def J16(g16):
    return build_mollifier(0.125, g16)


@pytest.fixture(scope="session")
def J32(g32):
    return build_mollifier(0.125, g32)


def nodal(grid, *comps):
    """Vector or scalar field from broadcastable nodal arrays."""
    arrs = [np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in comps]
    return Field(grid, values=arrs[0] if len(arrs) == 1 else np.stack(arrs))


def rel(a, b):
    return np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-300)


# one PASS/FAIL line per acceptance item, repeated in the terminal summary
ACCEPTANCE_LINES = []


def report(item, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} item {item:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
