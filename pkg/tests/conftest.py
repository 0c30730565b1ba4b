import numpy as np
import pytest

from moelab import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def numeric_grad(f, x: np.ndarray, idx, eps: float = 1e-6) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x[idx]`` (x mutated in place and restored)."""
    old = x[idx]
    x[idx] = old + eps
    hi = f()
    x[idx] = old - eps
    lo = f()
    x[idx] = old
    return (hi - lo) / (2 * eps)


def rel_err(a, b, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---- acceptance reporting -----------------------------------------------

_RESULTS = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        self.store[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    store = request.config.stash.setdefault(_RESULTS, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_RESULTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
