"""Dense float64 matrices with a small tape-based reverse-mode autodiff.

Only the handful of primitives the model needs are provided. Every op
accepts ``Matrix`` instances (or anything ``np.asarray`` understands, which
is wrapped as a constant) and returns a new immutable ``Matrix``. When at
least one input is tracked on a ``Tape``, the op is recorded there together
with its vector-Jacobian product.

    tape = Tape()
    w = tape.param(np.ones((1, 3)), "w")
    loss = matmul(w, np.array([[1.0], [2.0], [3.0]]))
    grads = backward(tape, loss)   # {"w": array([[1., 2., 3.]])}
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

ROWS = "rows"
COLS = "cols"


class Matrix:
    """Immutable 2-D float64 value, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id", "name")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int = -1, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix needs at most 2 dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in matrix{' ' + name if name else ''}")
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Matrix({self.rows}x{self.cols}{tag}, tracked={self.tracked})"


class Tape:
    """Ordered record of primitive ops for a single backward pass."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._leaves: dict[int, tuple[str, tuple[int, int]]] = {}
        self._next_id = 0
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def param(self, data, name: str) -> Matrix:
        """Register a learnable leaf. Gradients are reported under ``name``."""
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        if any(name == n for n, _ in self._leaves.values()):
            raise ContractError(f"duplicate leaf name {name!r}")
        m = Matrix(data, self, self._new_id(), name)
        self._leaves[m.node_id] = (name, m.shape)
        return m

    def record(self, data: np.ndarray, parents: Sequence[Matrix], vjp: Callable) -> Matrix:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        out = Matrix(data, self, self._new_id())
        self._records.append((out.node_id, tuple(p.node_id if p.tape is self else -1 for p in parents), vjp))
        return out


def as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def _tape_of(*ms: Matrix) -> Tape | None:
    tape = None
    for m in ms:
        if m.tape is not None:
            if tape is not None and m.tape is not tape:
                raise ContractError("inputs are tracked on different tapes")
            tape = m.tape
    return tape


def _emit(out: np.ndarray, parents: Sequence[Matrix], vjp: Callable) -> Matrix:
    tape = _tape_of(*parents)
    if tape is None:
        return Matrix(out)
    return tape.record(out, parents, vjp)


def matmul(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a) -> Matrix:
    a = as_matrix(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def add(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Matrix:
    a = as_matrix(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def softmax_axis(m, axis: str = COLS, scale: float = 1.0) -> Matrix:
    """Scaled softmax where every slice along ``axis`` sums to one.

    ``axis="cols"`` normalizes each column (over the rows), ``axis="rows"``
    normalizes each row (over the columns).
    """
    m = as_matrix(m)
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    if axis not in (ROWS, COLS):
        raise ValueError(f"axis must be {ROWS!r} or {COLS!r}, got {axis!r}")
    ax = 0 if axis == COLS else 1
    z = scale * m.data
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (scale * p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return _emit(p, (m,), vjp)


def l2_normalize_rows(m) -> Matrix:
    m = as_matrix(m)
    norms = np.sqrt((m.data * m.data).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise DegenerateInputError(f"cannot normalize all-zero row {int(zero[0])}")
    y = m.data / norms

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _emit(y, (m,), vjp)


def cosine(u, v) -> Matrix:
    """Cosine similarity of two row vectors, as a 1x1 matrix."""
    u, v = as_matrix(u), as_matrix(v)
    if u.rows != 1 or v.rows != 1 or u.cols != v.cols:
        raise ShapeError(f"cosine needs two 1xd rows, got {u.shape} and {v.shape}")
    x, y = u.data, v.data
    nx, ny = float(np.sqrt((x * x).sum())), float(np.sqrt((y * y).sum()))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cosine of a zero vector")
    c = float((x * y).sum()) / (nx * ny)

    def vjp(g):
        g = float(g[0, 0])
        return (g * (y / (nx * ny) - c * x / nx**2), g * (x / (nx * ny) - c * y / ny**2))

    return _emit(np.array([[c]]), (u, v), vjp)


def leaky_relu(m, slope: float = 0.01) -> Matrix:
    m = as_matrix(m)
    pos = m.data >= 0
    return _emit(np.where(pos, m.data, slope * m.data), (m,), lambda g: (np.where(pos, g, slope * g),))


def mean_rows(m) -> Matrix:
    """Mean over the row axis: n x d -> 1 x d."""
    m = as_matrix(m)
    n = m.rows
    if n == 0:
        raise ShapeError("mean of an empty matrix")
    return _emit(m.data.mean(axis=0, keepdims=True), (m,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(m) -> Matrix:
    m = as_matrix(m)
    shape = m.shape
    return _emit(np.array([[m.data.sum()]]), (m,), lambda g: (np.full(shape, g[0, 0]),))


def vstack(ms: Iterable) -> Matrix:
    ms = [as_matrix(m) for m in ms]
    if not ms:
        raise ShapeError("vstack of nothing")
    cols = {m.cols for m in ms}
    if len(cols) != 1:
        raise ShapeError(f"vstack column mismatch: {[m.shape for m in ms]}")
    bounds = np.cumsum([0] + [m.rows for m in ms])
    out = np.vstack([m.data for m in ms])
    return _emit(out, ms, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ms))))


def hstack(ms: Iterable) -> Matrix:
    ms = [as_matrix(m) for m in ms]
    if not ms:
        raise ShapeError("hstack of nothing")
    rows = {m.rows for m in ms}
    if len(rows) != 1:
        raise ShapeError(f"hstack row mismatch: {[m.shape for m in ms]}")
    bounds = np.cumsum([0] + [m.cols for m in ms])
    out = np.hstack([m.data for m in ms])
    return _emit(out, ms, lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ms))))


def take(m, i: int, j: int) -> Matrix:
    m = as_matrix(m)
    shape = m.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i, j] = g[0, 0]
        return (out,)

    return _emit(m.data[i:i + 1, j:j + 1].copy(), (m,), vjp)


def log(m, floor: float = 0.0) -> Matrix:
    """Elementwise natural log; values below ``floor`` are clamped (zero gradient there)."""
    m = as_matrix(m)
    x = m.data
    if floor > 0:
        clamped = x < floor
        xs = np.where(clamped, floor, x)
    else:
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        clamped = np.zeros(x.shape, dtype=bool)
        xs = x
    return _emit(np.log(xs), (m,), lambda g: (np.where(clamped, 0.0, g / xs),))


def backward(tape: Tape, loss: Matrix) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf registered with ``tape.param``.

    Leaves that the loss does not depend on get zero gradients. A tape can
    be consumed once.
    """
    if tape._consumed:
        raise ContractError("backward() already ran on this tape")
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 matrix, got {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for out_id, parent_ids, vjp in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for pid, pg in zip(parent_ids, vjp(g)):
            if pid < 0:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    return {name: grads.get(node_id, np.zeros(shape)) for node_id, (name, shape) in tape._leaves.items()}

