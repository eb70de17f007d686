"""Differentiable tensor core.

A small reverse-mode engine over float64 numpy arrays: Tensor values, a
tape of executed operations, analytic backward rules for every forward op,
and SGD with momentum. Everything learnable in this package is built on
these primitives.

Conventions:
  * arrays are float64 throughout; gradients are lazily allocated
  * binary elementwise ops require equal shapes, except that a rank-1
    operand may broadcast over the rows of a rank-2 one (bias add)
  * `stable=True` on matmul selects a fixed-reduction-order kernel whose
    result for a row does not depend on which row slot it occupies; the
    graph-fusion code needs this for exact permutation equivariance
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tape",
    "no_grad",
    "matmul",
    "affine",
    "lstm_packed",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "exp",
    "leaky_relu",
    "softmax",
    "neighbor_softmax",
    "concat",
    "concat_rows",
    "split_cols",
    "reshape",
    "transpose",
    "take_rows",
    "sum_all",
    "mean_all",
    "mse_loss",
    "cross_entropy",
    "backward",
    "zero_grads",
    "sgd_step",
]


class Tape:
    """Ordered record of op outputs; creation order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def append(self, node: "Tensor"):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    """The active tape. Clear it between training steps."""
    return _TAPE


@contextmanager
def no_grad():
    """Disable recording; forward results carry requires_grad=False."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with a lazily allocated gradient slot.

    Values are treated as immutable after creation; only `grad` (and, for
    parameters, the momentum buffer) mutate. Ops never write into their
    inputs, and the optimizer rebinds `data` rather than updating in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._parents is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Learnable tensor with a momentum buffer and a name path."""

    __slots__ = ("name", "momentum")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _record(out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _TAPE.append(out)
    return out


def _acc(t: Tensor, g: np.ndarray):
    # never in place: backward closures may hand the same array to two parents
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# forward ops


def _stable_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed per-element reduction order, independent of row slot
    return (a[:, :, None] * b[None, :, :]).sum(axis=1)


def _logistic(x: np.ndarray) -> np.ndarray:
    # two-branch logistic, overflow-free on both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def matmul(a: Tensor, b: Tensor, stable: bool = False) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    mm = _stable_mm if stable else np.matmul
    out = Tensor(mm(a.data, b.data))

    def bwd(g):
        if a.requires_grad:
            _acc(a, mm(g, b.data.T))
        if b.requires_grad:
            _acc(b, mm(a.data.T, g))

    return _record(out, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None, stable: bool = False) -> Tensor:
    """x @ w.T (+ b) in one tape node; w is [d_out, d_in].

    Equivalent to matmul(x, transpose(w)) + b but without materializing the
    transposed weight; this is the hot path of every recurrent step.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"affine shapes incompatible: {x.shape} x {w.shape}^T")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"affine bias {b.shape} vs {w.shape[0]} outputs")
    mm = _stable_mm if stable else np.matmul
    out_data = mm(x.data, w.data.T)
    if b is not None:
        out_data = out_data + b.data
    out = Tensor(out_data)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            _acc(x, mm(g, w.data))
        if w.requires_grad:
            _acc(w, mm(g.T, x.data))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _record(out, parents, bwd)


def lstm_packed(x: Tensor, h: Tensor, c: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor) -> Tensor:
    """One LSTM update as a single tape node returning [h' | c'] packed.

    Gate packing along the 4h axis is (input, forget, cell, output); the
    hand-written backward is held to the same finite-difference oracle as
    the composed ops. Recurrent stacks spend most of their time here, so
    this trades op granularity for one analytic node.
    """
    n_h = w_hidden.shape[1]
    z = np.matmul(x.data, w_input.data.T) + np.matmul(h.data, w_hidden.data.T) + bias.data
    zi, zf, zg, zo = (z[:, k * n_h:(k + 1) * n_h] for k in range(4))
    i = _logistic(zi)
    f = _logistic(zf)
    g_ = np.tanh(zg)
    o = _logistic(zo)
    c_new = f * c.data + i * g_
    tc = np.tanh(c_new)
    out = Tensor(np.concatenate([o * tc, c_new], axis=1))

    def bwd(grad):
        gh, gc = grad[:, :n_h], grad[:, n_h:]
        d_o = gh * tc
        d_ct = gc + gh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, 0 * n_h:1 * n_h] = d_ct * g_ * i * (1.0 - i)
        dz[:, 1 * n_h:2 * n_h] = d_ct * c.data * f * (1.0 - f)
        dz[:, 2 * n_h:3 * n_h] = d_ct * i * (1.0 - g_ * g_)
        dz[:, 3 * n_h:4 * n_h] = d_o * o * (1.0 - o)
        if x.requires_grad:
            _acc(x, np.matmul(dz, w_input.data))
        if h.requires_grad:
            _acc(h, np.matmul(dz, w_hidden.data))
        if c.requires_grad:
            _acc(c, d_ct * f)
        if w_input.requires_grad:
            _acc(w_input, np.matmul(dz.T, x.data))
        if w_hidden.requires_grad:
            _acc(w_hidden, np.matmul(dz.T, h.data))
        if bias.requires_grad:
            _acc(bias, dz.sum(axis=0))

    return _record(out, (x, h, c, w_input, w_hidden, bias), bwd)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return None
    # rank-1 bias broadcast over rank-2 rows
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a"
    raise DimensionError(f"{op} shapes incompatible: {a.shape} vs {b.shape}")


def _reduce_broadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return g.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _reduce_broadcast(g, a))
        if b.requires_grad:
            _acc(b, _reduce_broadcast(g, b))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _reduce_broadcast(g, a))
        if b.requires_grad:
            _acc(b, _reduce_broadcast(-g, b))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _reduce_broadcast(g * b.data, a))
        if b.requires_grad:
            _acc(b, _reduce_broadcast(g * a.data, b))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * s)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * s)

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * (1.0 - y * y))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = _logistic(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * y * (1.0 - y))

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * y)

    return _record(out, (a,), bwd)


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """Leaky rectifier; the subgradient at 0 takes the positive branch."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.where(x >= 0, x, slope * x))

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * np.where(x >= 0, 1.0, slope))

    return _record(out, (a,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax of a rank-1 tensor, computed with max subtraction."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"softmax expects rank-1 input, got shape {x.shape}")
    if x.size == 0:
        raise DomainError("softmax of an empty tensor is undefined")
    e = np.exp(x.data - x.data.max())
    s = e / e.sum()
    out = Tensor(s)

    def bwd(g):
        if x.requires_grad:
            _acc(x, s * (g - float(g @ s)))

    return _record(out, (x,), bwd)


def neighbor_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Per-receiver softmax of source-node scores over a binary mask.

    Row v of the result holds weights over {u : mask[v, u] = 1}, summing to
    1; rows with no neighbors are all zero. mask is a constant.
    """
    scores = _as_tensor(scores)
    n = scores.size
    if scores.ndim != 1 or mask.shape != (n, n):
        raise DimensionError(f"neighbor_softmax: scores {scores.shape} vs mask {mask.shape}")
    m = mask.astype(bool)
    full = np.where(m, np.broadcast_to(scores.data, (n, n)), -np.inf)
    row_max = np.where(m.any(axis=1), full.max(axis=1), 0.0)
    e = np.where(m, np.exp(full - row_max[:, None]), 0.0)
    denom = e.sum(axis=1)
    safe = np.where(denom > 0, denom, 1.0)
    w = e / safe[:, None]
    out = Tensor(w)

    def bwd(g):
        if scores.requires_grad:
            rowdot = (g * w).sum(axis=1)
            _acc(scores, (w * (g - rowdot[:, None])).sum(axis=0))

    return _record(out, (scores,), bwd)


def concat(*parts: Tensor) -> Tensor:
    """Concatenate rank-1 tensors, or rank-2 tensors row-wise along columns."""
    ts = tuple(_as_tensor(p) for p in parts)
    if not ts:
        raise DimensionError("concat of zero tensors")
    nd = ts[0].ndim
    if any(t.ndim != nd for t in ts) or nd not in (1, 2):
        raise DimensionError(f"concat rank mismatch: {[t.shape for t in ts]}")
    if nd == 2 and len({t.shape[0] for t in ts}) != 1:
        raise DimensionError(f"concat leading dims differ: {[t.shape for t in ts]}")
    axis = nd - 1
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    widths = [t.shape[axis] for t in ts]

    def bwd(g):
        off = 0
        for t, w in zip(ts, widths):
            if t.requires_grad:
                sl = slice(off, off + w)
                _acc(t, g[sl] if axis == 0 else g[:, sl])
            off += w

    return _record(out, ts, bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors of equal width along the row axis."""
    ts = tuple(_as_tensor(p) for p in parts)
    if not ts or any(t.ndim != 2 for t in ts) or len({t.shape[1] for t in ts}) != 1:
        raise DimensionError(f"concat_rows expects rank-2 tensors of equal width: {[t.shape for t in ts]}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=0))
    heights = [t.shape[0] for t in ts]

    def bwd(g):
        off = 0
        for t, n in zip(ts, heights):
            if t.requires_grad:
                _acc(t, g[off:off + n])
            off += n

    return _record(out, ts, bwd)


def split_cols(t: Tensor, n_chunks: int) -> list[Tensor]:
    """Split the last axis into equal chunks; inverse of concat."""
    t = _as_tensor(t)
    width = t.shape[-1]
    if width % n_chunks != 0:
        raise DimensionError(f"cannot split width {width} into {n_chunks} chunks")
    w = width // n_chunks
    outs = []
    for i in range(n_chunks):
        sl = slice(i * w, (i + 1) * w)
        piece = Tensor(t.data[..., sl].copy())

        def bwd(g, sl=sl):
            full = np.zeros_like(t.data)
            full[..., sl] = g
            _acc(t, full)

        outs.append(_record(piece, (t,), bwd))
    return outs


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data.reshape(shape))

    def bwd(g):
        if t.requires_grad:
            _acc(t, g.reshape(t.shape))

    return _record(out, (t,), bwd)


def transpose(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose expects rank-2 input, got {t.shape}")
    out = Tensor(t.data.T)

    def bwd(g):
        if t.requires_grad:
            _acc(t, g.T)

    return _record(out, (t,), bwd)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup; gradient scatter-adds into the selected rows."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a rank-2 table, got {table.shape}")
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _acc(table, full)

    return _record(out, (table,), bwd)


def sum_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data.sum())

    def bwd(g):
        if t.requires_grad:
            _acc(t, np.full_like(t.data, float(g)))

    return _record(out, (t,), bwd)


def mean_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data.mean())

    def bwd(g):
        if t.requires_grad:
            _acc(t, np.full_like(t.data, float(g) / t.size))

    return _record(out, (t,), bwd)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference over all entries."""
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out = Tensor(np.mean(diff * diff))

    def bwd(g):
        if pred.requires_grad:
            _acc(pred, (2.0 / pred.size) * diff * float(g))

    return _record(out, (pred,), bwd)


def cross_entropy(logits: Tensor, target, weights=None, reduction: str = "mean") -> Tensor:
    """Negative log softmax probability of the target class, in log space.

    Accepts a rank-1 logit vector with an int target, or a rank-2 batch with
    one target per row. Optional per-row weights; "mean" divides by the
    weight total, "sum" does not.
    """
    logits = _as_tensor(logits)
    squeeze = logits.ndim == 1
    l = logits.data[None, :] if squeeze else logits.data
    if l.ndim != 2:
        raise DimensionError(f"cross_entropy expects rank-1 or rank-2 logits, got {logits.shape}")
    ids = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if ids.shape[0] != l.shape[0]:
        raise DimensionError(f"cross_entropy: {l.shape[0]} rows but {ids.shape[0]} targets")
    if ids.size and (ids.min() < 0 or ids.max() >= l.shape[1]):
        raise IndexError(f"cross_entropy target out of range [0, {l.shape[1]})")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    w = np.ones(l.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    m = l.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l - m).sum(axis=1))
    per_row = lse - l[np.arange(l.shape[0]), ids]
    total_w = w.sum()
    if reduction == "mean":
        value = (w * per_row).sum() / max(total_w, 1.0)
        row_scale = w / max(total_w, 1.0)
    else:
        value = (w * per_row).sum()
        row_scale = w
    out = Tensor(value)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(l - lse[:, None])
            p[np.arange(l.shape[0]), ids] -= 1.0
            gl = p * (row_scale * float(g))[:, None]
            _acc(logits, gl[0] if squeeze else gl)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# reverse pass and optimizer


def backward(loss: Tensor):
    """Reverse-accumulate gradients of a scalar loss into every reachable leaf.

    Leaf gradients accumulate across calls (+=); intermediate gradients are
    reset at the start of each call, so running backward twice on an intact
    tape exactly doubles every leaf gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    reach = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) not in reach:
            reach.add(id(node))
            if node._parents:
                stack.extend(node._parents)
    for node in _TAPE.nodes:
        if id(node) in reach and node._parents is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE.nodes):
        if id(node) in reach and node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float):
    """Heavy-ball SGD: buffer <- momentum*buffer + grad; param <- param - lr*buffer."""
    if lr <= 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient; run backward first")
        p.momentum *= momentum
        p.momentum += p.grad
        p.data = p.data - lr * p.momentum
