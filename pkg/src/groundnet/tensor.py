"""Dense tensors with taped reverse-mode differentiation.

Design notes:
  * Row-major numpy storage; float64 by default, float32 selectable per tensor.
  * No implicit broadcasting: elementwise ops require identical shapes, and
    the only shape-mixing primitives are the explicit ones (`outer`,
    `add_row_bias`, `add_channel_bias`).
  * Recording is opt-in: inside a `recording(tape)` block every primitive
    whose inputs require gradients appends an adjoint closure to the tape.
    Forward values are computed by the same numpy calls whether or not a
    tape is active, so tracked and untracked forwards agree bitwise.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "recording", "backward",
    "add", "sub", "mul", "neg", "matmul", "outer",
    "relu", "tanh", "sigmoid", "exp", "log",
    "softmax", "sum_", "mean_", "reshape", "transpose2d",
    "concat", "stack_rows", "row", "element", "gather_rows",
    "add_row_bias", "add_channel_bias", "conv2d",
    "sigmoid_bce_logits", "softmax_ce_logits", "smooth_l1",
    "check_finite", "zero_grads",
]


class Tensor:
    """n-dimensional real array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = np.array(data)
        else:
            arr = np.array(data, dtype=dtype or np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor._wrap(self.data.astype(dtype))
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations, replayed in reverse by backward()."""

    def __init__(self):
        self._entries: list[tuple[str, Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, name: str, out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
        self._entries.append((name, out, adjoint))

    def op_names(self) -> list[str]:
        return [name for name, _, _ in self._entries]


_ACTIVE: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None):
    """Activate `tape` (a fresh one if None) for ops run inside the block."""
    tape = tape if tape is not None else Tape()
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _emit(name: str, out: Tensor, inputs: tuple[Tensor, ...],
          adjoint: Callable[[np.ndarray], None]) -> Tensor:
    """Mark `out` differentiable and record `adjoint` if a tape is active."""
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(name, out, adjoint)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every tracked tensor reachable from `loss`.

    Grads on leaf tensors accumulate across calls; the caller resets them
    (see `zero_grads`). Interior grads are cleared before each replay.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    for _, out, _ in tape._entries:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for _, out, adjoint in reversed(tape._entries):
        if out.grad is not None:
            adjoint(out.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Explicit NaN/Inf detection; raises NumericError on any non-finite value."""
    if not np.isfinite(t.data).all():
        raise NumericError(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# elementwise arithmetic (same-shape only; python scalars allowed)
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor | float):
    if isinstance(b, (int, float)):
        out = Tensor._wrap(a.data + b)
        return _emit("add_s", out, (a,), lambda g: _accum(a, g))
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)

    def adjoint(g):
        _accum(a, g)
        _accum(b, g)

    return _emit("add", out, (a, b), adjoint)


def sub(a: Tensor, b: Tensor | float):
    if isinstance(b, (int, float)):
        return add(a, -b)
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)

    def adjoint(g):
        _accum(a, g)
        _accum(b, -g)

    return _emit("sub", out, (a, b), adjoint)


def mul(a: Tensor, b: Tensor | float):
    if isinstance(b, (int, float)):
        out = Tensor._wrap(a.data * b)
        return _emit("mul_s", out, (a,), lambda g: _accum(a, g * b))
    _check_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)

    def adjoint(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _emit("mul", out, (a, b), adjoint)


def neg(a: Tensor):
    out = Tensor._wrap(-a.data)
    return _emit("neg", out, (a,), lambda g: _accum(a, -g))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    """2D @ 2D or 2D @ 1D matrix product."""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    if b.ndim == 2:
        def adjoint(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
    else:
        def adjoint(g):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    return _emit("matmul", out, (a, b), adjoint)


def outer(u: Tensor, v: Tensor):
    """Outer product of two vectors: (m,) x (n,) -> (m, n)."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer: expected vectors, got {u.shape} and {v.shape}")
    out = Tensor._wrap(np.outer(u.data, v.data))

    def adjoint(g):
        _accum(u, g @ v.data)
        _accum(v, u.data @ g)

    return _emit("outer", out, (u, v), adjoint)


def transpose2d(a: Tensor):
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected matrix, got {a.shape}")
    out = Tensor._wrap(a.data.T.copy())
    return _emit("transpose2d", out, (a,), lambda g: _accum(a, g.T))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor):
    out = Tensor._wrap(np.maximum(a.data, 0))
    return _emit("relu", out, (a,), lambda g: _accum(a, g * (a.data > 0)))


def tanh(a: Tensor):
    y = np.tanh(a.data)
    out = Tensor._wrap(y)
    return _emit("tanh", out, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def sigmoid(a: Tensor):
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor._wrap(y)
    return _emit("sigmoid", out, (a,), lambda g: _accum(a, g * y * (1.0 - y)))


def exp(a: Tensor):
    y = np.exp(a.data)
    out = Tensor._wrap(y)
    return _emit("exp", out, (a,), lambda g: _accum(a, g * y))


def log(a: Tensor):
    out = Tensor._wrap(np.log(a.data))
    return _emit("log", out, (a,), lambda g: _accum(a, g / a.data))


def softmax(a: Tensor, axis: int = -1):
    """Max-subtracted softmax along `axis`; output sums to 1 along it."""
    if a.size == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)

    def adjoint(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _emit("softmax", out, (a,), adjoint)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None):
    out = Tensor._wrap(np.asarray(a.data.sum(axis=axis)))

    def adjoint(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.data.dtype))

    return _emit("sum", out, (a,), adjoint)


def mean_(a: Tensor, axis: int | None = None):
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over empty axis")
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]):
    out = Tensor._wrap(a.data.reshape(shape))
    return _emit("reshape", out, (a,), lambda g: _accum(a, g.reshape(a.shape)))


def concat(parts: Sequence[Tensor], axis: int = 0):
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def adjoint(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _emit("concat", out, tuple(parts), adjoint)


def stack_rows(vecs: Sequence[Tensor]):
    """Stack 1D tensors of equal length into a (len(vecs), n) matrix."""
    if not vecs:
        raise ShapeError("stack_rows of zero vectors")
    n = vecs[0].shape[0]
    for v in vecs:
        if v.ndim != 1 or v.shape[0] != n:
            raise ShapeError(f"stack_rows: inconsistent vector shape {v.shape}")
    out = Tensor._wrap(np.stack([v.data for v in vecs], axis=0))

    def adjoint(g):
        for i, v in enumerate(vecs):
            _accum(v, g[i])

    return _emit("stack_rows", out, tuple(vecs), adjoint)


def row(a: Tensor, i: int):
    """Row i of a matrix as a vector."""
    if a.ndim != 2:
        raise ShapeError(f"row: expected matrix, got {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise ContractError(f"row index {i} out of range for {a.shape}")
    out = Tensor._wrap(a.data[i].copy())

    def adjoint(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            _accum(a, full)

    return _emit("row", out, (a,), adjoint)


def element(a: Tensor, idx: int):
    """Element idx of a vector, as a scalar tensor."""
    if a.ndim != 1:
        raise ShapeError(f"element: expected vector, got {a.shape}")
    if not 0 <= idx < a.shape[0]:
        raise ContractError(f"element index {idx} out of range for {a.shape}")
    out = Tensor._wrap(np.asarray(a.data[idx]))

    def adjoint(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _emit("element", out, (a,), adjoint)


def gather_rows(table: Tensor, ids: np.ndarray):
    """Rows table[ids]; backward scatter-adds, so repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: expected matrix table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"gather_rows: id out of range for table {table.shape}")
    out = Tensor._wrap(table.data[ids])

    def adjoint(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _emit("gather_rows", out, (table,), adjoint)


# ---------------------------------------------------------------------------
# explicit bias broadcasts
# ---------------------------------------------------------------------------

def add_row_bias(x: Tensor, b: Tensor):
    """x (M,N) + b (N,) applied to every row."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row_bias: {x.shape} with bias {b.shape}")
    out = Tensor._wrap(x.data + b.data[None, :])

    def adjoint(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _emit("add_row_bias", out, (x, b), adjoint)


def add_channel_bias(x: Tensor, b: Tensor):
    """x (C,H,W) + b (C,) applied to every spatial position."""
    if x.ndim != 3 or b.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.shape} with bias {b.shape}")
    out = Tensor._wrap(x.data + b.data[:, None, None])

    def adjoint(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(1, 2)))

    return _emit("add_channel_bias", out, (x, b), adjoint)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return xp[:, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0):
    """2D convolution (cross-correlation): x (C,H,W), w (F,C,kh,kw) -> (F,H',W').

    H' = floor((H + 2*pad - kh)/stride) + 1, and likewise W'.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) and (F,C,kh,kw), got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input "
                         f"({h + 2 * pad},{wd + 2 * pad})")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, c * kh * kw)
    out = Tensor._wrap((wmat @ cols).reshape(f, ho, wo))

    def adjoint(g):
        gmat = g.reshape(f, ho * wo)
        if w.requires_grad:
            _accum(w, (gmat @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = wmat.T @ gmat
            _accum(x, _col2im(dcols, x.shape, kh, kw, stride, pad))

    return _emit("conv2d", out, (x, w), adjoint)


def bilinear_gather(x: Tensor, rows: np.ndarray, cols: np.ndarray):
    """Bilinear samples of a (C, H, W) map at fractional (row, col) points.

    `rows` and `cols` share an arbitrary shape Q; the result is (C, *Q).
    Coordinates are clamped to the map edges, so samples outside the grid
    take the nearest border value. Backward scatter-adds the four corner
    weights into the map gradient.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_gather: expected (C, H, W) map, got {x.shape}")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise ShapeError(f"bilinear_gather: rows {rows.shape} vs cols {cols.shape}")
    _, h, w = x.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    vals = (x.data[:, r0, c0] * w00 + x.data[:, r0, c1] * w01
            + x.data[:, r1, c0] * w10 + x.data[:, r1, c1] * w11)
    out = Tensor._wrap(vals)

    def adjoint(g):
        full = np.zeros_like(x.data)
        for rr, cc, ww in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
            np.add.at(full, (slice(None), rr, cc), g * ww)
        _accum(x, full)

    return _emit("bilinear_gather", out, (x,), adjoint)


# ---------------------------------------------------------------------------
# fused, numerically stable loss kernels
# ---------------------------------------------------------------------------

def sigmoid_bce_logits(logits: Tensor, targets: np.ndarray):
    """Per-element binary cross-entropy from logits: stable for large |z|."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce_logits: targets {t.shape} vs logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor._wrap(loss)

    def adjoint(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        p[~pos] = e / (1.0 + e)
        _accum(logits, g * (p - t))

    return _emit("sigmoid_bce_logits", out, (logits,), adjoint)


def softmax_ce_logits(logits: Tensor, labels: np.ndarray):
    """Per-row cross-entropy from logits (R,K) against integer labels (R,)."""
    lab = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or lab.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_ce_logits: logits {logits.shape}, labels {lab.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    out = Tensor._wrap(lse - z[np.arange(len(lab)), lab])

    def adjoint(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(lab)), lab] -= 1.0
        _accum(logits, p * g[:, None])

    return _emit("softmax_ce_logits", out, (logits,), adjoint)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0):
    """Per-element smooth L1 (Huber): 0.5 d^2/beta if |d| < beta else |d| - beta/2."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {t.shape} vs pred {pred.shape}")
    d = pred.data - t
    small = np.abs(d) < beta
    loss = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    out = Tensor._wrap(loss)

    def adjoint(g):
        _accum(pred, g * np.where(small, d / beta, np.sign(d)))

    return _emit("smooth_l1", out, (pred,), adjoint)
