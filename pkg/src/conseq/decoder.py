"""Synchronized multi-decoder orchestration.

Runs N recurrent decoders in lock step for T steps in one of three modes:

  independent   each decoder sees only its own previous output
  baseline2x    the previous output is duplicated (capacity-matched control)
  consistent    the second input is the graph-fused context of all
                decoders' previous outputs

The decoders here share one parameter set and are batched as the rows of
[n, .] tensors. The bank object supplies everything task-specific (input
embeddings, output heads, emission bookkeeping); this module owns the step
semantics: conditioning steps with a zeroed second input, fusion timing,
isolated-node masking, and synchronization.

Uncoupled modes (independent, baseline2x) run each decoder in a separate
pass so results are bit-identical to N single-decoder runs; batched BLAS
matmuls are not bitwise row-stable, so batching would break that contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .cells import lstm_step
from .diffcore import Tensor
from .errors import ConfigError, ContractError
from .fusion import DecoderGraph, FusionParams, fuse

DECODE_MODES = ("independent", "baseline2x", "consistent")


@dataclass
class DecodeConfig:
    """Decode-time settings shared by all decoders.

    k = 0 is a structural bypass: fusion is skipped entirely and the fused
    context stays zero (used by reduction tests); fuse() itself requires
    k >= 1. Conditioning steps (t < n_condition_steps) always see a zero
    second input.
    """

    mode: str
    total_steps: int
    k: int = 1
    fusion_mode: str = "full"
    n_condition_steps: int = 2
    teacher_forcing: bool = False
    sampling: str = "greedy"
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in DECODE_MODES:
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.sampling not in ("greedy", "sample"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")


@dataclass
class DecoderState:
    """Synchronized state after step t-1: hidden/cell stacks, the next own
    representation (each decoder's previous output embedding), and the
    features the fusion mechanism will consume next step."""

    t: int
    h: Tensor
    c: Tensor
    r_own: Tensor | None = None
    fuse_feed: Tensor | None = None
    r_fuse_last: Tensor | None = None


def input_combine(r_own: Tensor, r_fuse: Tensor | None, mode: str) -> Tensor:
    """Recurrent-unit input for one decoder group.

    independent -> r_own; baseline2x -> [r_own, r_own]; consistent ->
    [r_fuse, r_own] (fused context first).
    """
    if mode == "independent":
        return r_own
    if mode == "baseline2x":
        return dc.concat(r_own, r_own)
    if mode == "consistent":
        if r_fuse is None:
            raise ContractError("consistent mode needs a fused context tensor")
        return dc.concat(r_fuse, r_own)
    raise ConfigError(f"unknown decode mode {mode!r}")


def fused_context(feed: Tensor, graph: DecoderGraph, params: FusionParams, config: DecodeConfig) -> Tensor:
    """Fused context for the next step, with isolated decoders masked to zero.

    fuse() lets nodes without in-neighbors drift through the GRU; at the
    decoder level an isolated decoder must reduce to the zero-padded
    structure, so those rows are zeroed here.
    """
    if config.k == 0:
        return Tensor(np.zeros_like(feed.data))
    run_graph = graph if graph.k == config.k else DecoderGraph(graph.n_nodes, graph.edges.copy(), config.k)
    out = fuse(feed, run_graph, params, mode=config.fusion_mode)
    deg = graph.in_degrees()
    if (deg == 0).any():
        mask = np.repeat((deg > 0).astype(np.float64)[:, None], feed.shape[1], axis=1)
        out = dc.mul(out, Tensor(mask))
    return out


def step_all(bank, state: DecoderState, t: int, graph: DecoderGraph | None, config: DecodeConfig, rng=None, rows=None):
    """Advance every decoder one step; returns (new state, payload).

    Payload is whatever bank.emit produced, or None for the conditioning
    step at t=0 whose emission nothing consumes.
    """
    if state.t != t:
        raise ContractError(f"decoders desynchronized: state at step {state.t}, asked to run step {t}")
    own = bank.own_input(t, state.r_own, rows)
    if config.mode == "independent":
        second = None
    elif t < config.n_condition_steps:
        second = Tensor(np.zeros_like(own.data))
    elif config.mode == "baseline2x":
        second = own
    else:
        second = fused_context(state.fuse_feed, graph, bank.fusion_params, config)
    if config.mode == "independent":
        x = input_combine(own, None, "independent")
    else:
        # conditioning steps of baseline2x use the consistent layout with a
        # zeroed second slot: the second input is a zero vector until real
        # context exists
        x = dc.concat(second, own)
    h, c = lstm_step(x, state.h, state.c, bank.lstm)
    if t >= config.n_condition_steps - 1:
        payload, own_next, fuse_next = bank.emit(h, t, rows, rng)
    else:
        payload, own_next, fuse_next = None, None, None
    new_state = DecoderState(t + 1, h, c, r_own=own_next, fuse_feed=fuse_next, r_fuse_last=second)
    return new_state, payload


def _decode_rows(bank, graph: DecoderGraph | None, config: DecodeConfig, rng, rows):
    state = DecoderState(0, *bank.init_state(rows))
    payloads = []
    for t in range(config.total_steps):
        state, payload = step_all(bank, state, t, graph, config, rng=rng, rows=rows)
        if payload is not None:
            payloads.append(payload)
    return payloads


def decode(bank, graph: DecoderGraph | None, config: DecodeConfig, rng=None):
    """Run the full synchronized rollout; returns the per-step payload list.

    Emissions begin on the step that consumes the last conditioning input
    (t = n_condition_steps - 1); with total_steps = 1 only the first
    conditioning step executes and the result is empty.
    """
    if config.mode == "consistent":
        if graph is None:
            raise ConfigError("consistent mode requires a DecoderGraph")
        return _decode_rows(bank, graph, config, rng, rows=None)
    if bank.n_rows == 1:
        return _decode_rows(bank, graph, config, rng, rows=None)
    per_row = [_decode_rows(bank, graph, config, rng, rows=i) for i in range(bank.n_rows)]
    return bank.merge_rows(per_row)


def decode_batched(bank, graph: DecoderGraph | None, config: DecodeConfig, rng=None):
    """Single synchronized pass with rows batched regardless of mode.

    Training fast path: uncoupled modes are mathematically row-separable,
    so batching changes only floating-point rounding. The bitwise
    "independent equals N separate runs" contract applies to decode(),
    which keeps the per-decoder passes.
    """
    if config.mode == "consistent" and graph is None:
        raise ConfigError("consistent mode requires a DecoderGraph")
    return _decode_rows(bank, graph, config, rng, rows=None)
