import numpy as np
import pytest

from conceptmil import diffkernel as dk


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference relative to the larger max magnitude of the two."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def central_diff(f, x: np.ndarray, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central finite differences of scalar f at x; ``entries`` limits the probed flat indices."""
    grad = np.zeros(x.shape)
    for i in (range(x.size) if entries is None else entries):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def weighted_sum(m: dk.Matrix, weights: np.ndarray) -> dk.Matrix:
    """Tracked sum(weights * m) = trace(m^T weights), from kernel primitives only."""
    G = dk.matmul(dk.transpose(m), dk.Matrix(weights))
    total = dk.take(G, 0, 0)
    for j in range(1, G.rows):
        total = dk.add(total, dk.take(G, j, j))
    return total


def op_grad_error(build, inputs: list[np.ndarray], seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences of sum(R * build(*inputs))."""
    out = build(*[dk.Matrix(a) for a in inputs])
    probe = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(arrays):
        return float((build(*[dk.Matrix(a) for a in arrays]).data * probe).sum())

    tape = dk.Tape()
    leaves = [tape.param(a, f"x{i}") for i, a in enumerate(inputs)]
    grads = dk.backward(tape, weighted_sum(build(*leaves), probe))
    worst = 0.0
    for i, a in enumerate(inputs):
        def f(xi, i=i):
            arrays = list(inputs)
            arrays[i] = xi
            return scalar(arrays)
        worst = max(worst, rel_err(grads[f"x{i}"], central_diff(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
