"""Recurrent and embedding building blocks: LSTM step, GRU gating update,
affine layers, token embeddings, and parameter initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .errors import DimensionError


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Weight init: U(-s, s) with s = 1/sqrt(fan_in)."""
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _rows(x: Tensor) -> tuple[Tensor, bool]:
    # promote rank-1 input to a single row; callers demote on the way out
    if x.ndim == 1:
        return dc.reshape(x, (1, x.shape[0])), True
    if x.ndim == 2:
        return x, False
    raise DimensionError(f"expected rank-1 or rank-2 input, got {x.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, stable: bool = False) -> Tensor:
    """Affine map x @ w.T + b for w of shape [d_out, d_in]."""
    x2, squeeze = _rows(x)
    if x2.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    out = dc.affine(x2, w, b, stable=stable)
    return dc.reshape(out, (out.shape[1],)) if squeeze else out


@dataclass
class LstmParams:
    """Single-layer LSTM parameters.

    Gate packing along the 4h axis is (input, forget, cell, output).
    """

    w_input: Parameter  # [4h, d_in]
    w_hidden: Parameter  # [4h, h]
    bias: Parameter  # [4h]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, hidden: int, name: str) -> "LstmParams":
        return cls(
            w_input=Parameter(uniform_init(rng, (4 * hidden, d_in), d_in), f"{name}.w_input"),
            w_hidden=Parameter(uniform_init(rng, (4 * hidden, hidden), hidden), f"{name}.w_hidden"),
            bias=Parameter(np.zeros(4 * hidden), f"{name}.bias"),
        )

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def d_in(self) -> int:
        return self.w_input.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w_input, self.w_hidden, self.bias]


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM update; returns (h', c')."""
    x2, squeeze = _rows(x)
    h2, _ = _rows(h)
    c2, _ = _rows(c)
    if x2.shape[1] != p.d_in or h2.shape[1] != p.hidden or c2.shape[1] != p.hidden:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs params (d_in={p.d_in}, h={p.hidden})"
        )
    packed = dc.lstm_packed(x2, h2, c2, p.w_input, p.w_hidden, p.bias)
    h_new, c_new = dc.split_cols(packed, 2)
    if squeeze:
        n = p.hidden
        return dc.reshape(h_new, (n,)), dc.reshape(c_new, (n,))
    return h_new, c_new


@dataclass
class GruParams:
    """GRU gating parameters for equal input/state dims d."""

    w_update_in: Parameter
    w_update_state: Parameter
    w_reset_in: Parameter
    w_reset_state: Parameter
    w_cand_in: Parameter
    w_cand_state: Parameter
    b_update: Parameter
    b_reset: Parameter
    b_cand: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, name: str) -> "GruParams":
        def w(tag):
            return Parameter(uniform_init(rng, (d, d), d), f"{name}.{tag}")

        def b(tag):
            return Parameter(np.zeros(d), f"{name}.{tag}")

        return cls(
            w_update_in=w("w_update_in"),
            w_update_state=w("w_update_state"),
            w_reset_in=w("w_reset_in"),
            w_reset_state=w("w_reset_state"),
            w_cand_in=w("w_cand_in"),
            w_cand_state=w("w_cand_state"),
            b_update=b("b_update"),
            b_reset=b("b_reset"),
            b_cand=b("b_cand"),
        )

    @property
    def dim(self) -> int:
        return self.w_update_in.shape[0]

    def parameters(self) -> list[Parameter]:
        return [
            self.w_update_in,
            self.w_update_state,
            self.w_reset_in,
            self.w_reset_state,
            self.w_cand_in,
            self.w_cand_state,
            self.b_update,
            self.b_reset,
            self.b_cand,
        ]


def gru_combine(h_prev: Tensor, a: Tensor, p: GruParams, stable: bool = True) -> Tensor:
    """GRU gating update treating `a` as the input and `h_prev` as the state.

        z = sigmoid(a Wz + h Uz + bz)        update gate
        r = sigmoid(a Wr + h Ur + br)        reset gate
        hc = tanh(a Wh + (r*h) Uh + bh)      candidate
        h' = (1 - z)*h + z*hc

    Uses the fixed-reduction-order matmul kernel by default so results are
    independent of row placement (exact node-permutation equivariance).
    """
    h2, squeeze = _rows(h_prev)
    a2, _ = _rows(a)
    if h2.shape != a2.shape or h2.shape[1] != p.dim:
        raise DimensionError(f"gru_combine: h {h_prev.shape}, a {a.shape}, d={p.dim}")
    z = dc.sigmoid(linear(a2, p.w_update_in, stable=stable) + linear(h2, p.w_update_state, p.b_update, stable=stable))
    r = dc.sigmoid(linear(a2, p.w_reset_in, stable=stable) + linear(h2, p.w_reset_state, p.b_reset, stable=stable))
    hc = dc.tanh(linear(a2, p.w_cand_in, stable=stable) + linear(dc.mul(r, h2), p.w_cand_state, p.b_cand, stable=stable))
    one = Tensor(np.ones_like(z.data))
    h_new = dc.add(dc.mul(dc.sub(one, z), h2), dc.mul(z, hc))
    return dc.reshape(h_new, (p.dim,)) if squeeze else h_new


@dataclass
class EmbeddingTable:
    """Dense id -> vector lookup table."""

    table: Parameter  # [vocab_size, dim]

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, dim: int, name: str) -> "EmbeddingTable":
        return cls(table=Parameter(uniform_init(rng, (vocab_size, dim), dim), name))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.table]


def embed(ids, t: EmbeddingTable) -> Tensor:
    """Row lookup into the table; gradient scatters into the used rows."""
    return dc.take_rows(t.table, ids)
