import numpy as np
import pytest

from flowaug import diffcore as dc


def central_diff(f, x, h=1e-5):
    """Plain-numpy central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def numerical_jacobian(f, x, h=1e-5):
    """Jacobian of a vector function R^C -> R^C by central differences."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def elimination_logabsdet(a):
    """log|det A| by Gaussian elimination with partial pivoting (no LAPACK)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    total = 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0:
            return -np.inf
        a[[k, p]] = a[[p, k]]
        total += np.log(abs(a[k, k]))
        a[k + 1:] -= np.outer(a[k + 1:, k] / a[k, k], a[k])
    return total


@pytest.fixture(autouse=True)
def _float64_strict():
    dc.set_default_dtype(np.float64)
    with dc.strict(True):
        yield


def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(pytestconfig):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        pytestconfig._acceptance.append(line)
        print(line)
        assert ok, line
    return record
