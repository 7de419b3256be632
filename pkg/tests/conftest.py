import numpy as np
import pytest

from eaekit.tensor import Tape, Tensor, backward

_ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, arrays, h=1e-6, coords=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array.

    ``coords`` optionally limits each array to a list of flat indices; other
    entries are returned as NaN.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.full(a.shape, np.nan)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        idx = range(flat_a.size) if coords is None else coords[k]
        for i in idx:
            old = flat_a[i]
            flat_a[i] = old + h
            up = f(*arrays)
            flat_a[i] = old - h
            down = f(*arrays)
            flat_a[i] = old
            flat_g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def autodiff_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via the tape."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = build(*tensors)
        backward(out)
    return [t.grad for t in tensors]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_min_norm(d, step=1e-3):
    """Smallest ``||(dy, ds)||_2`` over the grid ``[-d, d]^2`` subject to ``d + dy <= ds``.

    Same answer as scanning every grid pair: since ``d + dy >= 0`` on this
    grid, the best ``ds`` for a given ``dy`` is the first grid value that
    reaches ``d + dy``.
    """
    if d == 0:
        return 0.0
    axis = np.linspace(-d, d, 2 * int(round(d / step)) + 1)
    k = np.searchsorted(axis, d + axis - 1e-12)
    ok = k < axis.size
    return float(np.hypot(axis[ok], axis[k[ok]]).min())
