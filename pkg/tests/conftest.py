from itertools import chain, combinations

import numpy as np
import pytest


def powerset(items):
    items = list(items)
    return chain.from_iterable(combinations(items, k) for k in range(len(items) + 1))


def random_psd(rng, n, rank=None, scale=1.0):
    """Random PSD kernel B^T B (full rank unless ``rank`` is given)."""
    B = rng.standard_normal((rank or n, n)) * scale
    return B.T @ B


def brute_det(M):
    """Cofactor expansion; independent of LAPACK's LU path."""
    M = [list(map(float, row)) for row in M]
    n = len(M)
    if n == 0:
        return 1.0
    if n == 1:
        return M[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        total += (-1) ** j * M[0][j] * brute_det(minor)
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def central_diff(fn, x, step=1e-5):
    """Central finite differences of scalar ``fn`` at the flat vector ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return out


def rel_err(analytic, numeric):
    """Normwise relative error: max abs difference over the largest reference entry."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; all lines reappear in the terminal summary."""
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
