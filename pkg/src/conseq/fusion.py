"""Graph-based consistency fusion.

N decoders form a directed graph; each round, every node broadcasts an
attention-weighted linear message to its out-neighbors and absorbs the
aggregated messages through a GRU gating update. After K rounds the node
features are the fused context vectors handed back to the decoders.

All node-axis matmuls use the fixed-reduction-order kernel, so relabeling
the nodes permutes the output bitwise (exactly for in-degree <= 2, and to
within summation rounding otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .cells import GruParams, gru_combine, linear, uniform_init
from .diffcore import Parameter, Tensor
from .errors import ConfigError, DimensionError

ATTENTION_SLOPE = 0.01  # leaky rectifier slope inside the attention net

FUSION_MODES = ("full", "no_gnn", "equal_attention")


@dataclass
class DecoderGraph:
    """Decoder dependency graph: binary adjacency plus the round count.

    edges[i, j] = 1 iff decoder j's messages reach decoder i. The diagonal
    is zero: self influence flows through the GRU state, not a message.
    Directed influence is allowed, so edges need not be symmetric.
    """

    n_nodes: int
    edges: np.ndarray
    k: int = 1

    def __post_init__(self):
        e = np.asarray(self.edges)
        if e.shape != (self.n_nodes, self.n_nodes):
            raise DimensionError(f"adjacency shape {e.shape} for {self.n_nodes} nodes")
        if not np.isin(e, (0, 1)).all():
            raise ConfigError("adjacency entries must be 0 or 1")
        if np.diagonal(e).any():
            raise ConfigError("adjacency diagonal must be zero (no self edges)")
        if self.k < 1:
            raise ConfigError(f"message-passing rounds must be >= 1, got {self.k}")
        self.edges = e.astype(np.float64)

    def in_degrees(self) -> np.ndarray:
        return self.edges.sum(axis=1)


def build_adjacency(pairs, n: int, directed: bool = False) -> np.ndarray:
    """Adjacency matrix from (i, j) correlation pairs.

    Undirected by default: each pair contributes both directions. With
    directed=True, (i, j) means "j influences i" only. Self pairs are
    ignored (the diagonal stays zero).
    """
    e = np.zeros((n, n))
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"pair ({i}, {j}) out of range for {n} nodes")
        if i == j:
            continue
        e[i, j] = 1.0
        if not directed:
            e[j, i] = 1.0
    return e


@dataclass
class FusionParams:
    """Learnable pieces: the shared d x d kernel, the three-layer attention
    net (widths d -> d/2 -> d/4 -> 1, leaky rectifiers between), and the GRU
    used to fold messages into node state. All shared across rounds."""

    kernel: Parameter
    att_w1: Parameter
    att_b1: Parameter
    att_w2: Parameter
    att_b2: Parameter
    att_w3: Parameter
    att_b3: Parameter
    gru: GruParams

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, name: str = "fusion") -> "FusionParams":
        h1 = max(1, d // 2)
        h2 = max(1, d // 4)
        return cls(
            kernel=Parameter(uniform_init(rng, (d, d), d), f"{name}.kernel"),
            att_w1=Parameter(uniform_init(rng, (h1, d), d), f"{name}.att_w1"),
            att_b1=Parameter(np.zeros(h1), f"{name}.att_b1"),
            att_w2=Parameter(uniform_init(rng, (h2, h1), h1), f"{name}.att_w2"),
            att_b2=Parameter(np.zeros(h2), f"{name}.att_b2"),
            att_w3=Parameter(uniform_init(rng, (1, h2), h2), f"{name}.att_w3"),
            att_b3=Parameter(np.zeros(1), f"{name}.att_b3"),
            gru=GruParams.init(rng, d, f"{name}.gru"),
        )

    @property
    def dim(self) -> int:
        return self.kernel.shape[0]

    def parameters(self) -> list[Parameter]:
        own = [self.kernel, self.att_w1, self.att_b1, self.att_w2, self.att_b2, self.att_w3, self.att_b3]
        return own + self.gru.parameters()

    def gated_parameters(self) -> list[Parameter]:
        """Kernel + GRU only: the set exercised when attention is inert
        (equal_attention mode, or two-node graphs where every softmax is
        over a single neighbor)."""
        return [self.kernel] + self.gru.parameters()

    def active_parameters(self, mode: str, pairwise: bool = False) -> list[Parameter]:
        """Parameters the forward pass actually touches for a fusion mode."""
        if mode == "no_gnn":
            return []
        if mode == "equal_attention" or pairwise:
            return self.gated_parameters()
        return self.parameters()

    def attention_net(self, m: Tensor) -> Tensor:
        """Raw per-node score from the kernel-mapped feature; [n, d] -> [n]."""
        a = dc.leaky_relu(linear(m, self.att_w1, self.att_b1, stable=True), ATTENTION_SLOPE)
        a = dc.leaky_relu(linear(a, self.att_w2, self.att_b2, stable=True), ATTENTION_SLOPE)
        a = linear(a, self.att_w3, self.att_b3, stable=True)
        return dc.reshape(a, (a.shape[0],))


def attention_scores(h: Tensor, params: FusionParams, graph: DecoderGraph) -> tuple[Tensor, Tensor]:
    """Normalized edge weights plus the raw source scores.

    Every edge leaving node u carries the same raw score fc(kernel @ h_u);
    the weights over each receiver's in-neighbors are softmax-normalized to
    sum to 1. Returns (weights [n, n], raw [n]): weights[v, u] is the
    weight node v puts on u's message, zero for non-neighbors.
    """
    if h.shape[1] != params.dim:
        raise DimensionError(f"attention_scores: features {h.shape} vs d={params.dim}")
    mapped = dc.matmul(h, dc.transpose(params.kernel), stable=True)
    raw = params.attention_net(mapped)
    weights = dc.neighbor_softmax(raw, graph.edges)
    return weights, raw


def aggregate(h: Tensor, weights: Tensor, kernel: Parameter) -> Tensor:
    """Per-node message sums: a_v = sum_u weights[v, u] * (kernel @ h_u).

    Nodes with no in-neighbors receive zeros (weights row is all zero).
    """
    mapped = dc.matmul(h, dc.transpose(kernel), stable=True)
    return dc.matmul(weights, mapped, stable=True)


def _uniform_weights(graph: DecoderGraph) -> np.ndarray:
    deg = graph.in_degrees()
    safe = np.where(deg > 0, deg, 1.0)
    return graph.edges / safe[:, None]


def fuse(h0: Tensor, graph: DecoderGraph, params: FusionParams, mode: str = "full") -> Tensor:
    """Run the fusion mechanism on initial node features h0 [n, d].

    full            K rounds of attention -> aggregate -> GRU combine.
    no_gnn          unweighted mean of direct neighbors' h0; no kernel, no
                    GRU; isolated nodes get zeros.
    equal_attention one gated round with uniform weights over in-neighbors.

    Isolated nodes in the gated modes still run the GRU on a zero message,
    so they drift from their h0; decoder orchestration masks that out.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if h0.ndim != 2 or h0.shape[0] != graph.n_nodes or h0.shape[1] != params.dim:
        raise DimensionError(f"fuse: features {h0.shape} vs {graph.n_nodes} nodes, d={params.dim}")
    if mode == "no_gnn":
        return dc.matmul(Tensor(_uniform_weights(graph)), h0, stable=True)
    if mode == "equal_attention":
        w = Tensor(_uniform_weights(graph))
        a = aggregate(h0, w, params.kernel)
        return gru_combine(h0, a, params.gru)
    h = h0
    for _ in range(graph.k):
        weights, _ = attention_scores(h, params, graph)
        a = aggregate(h, weights, params.kernel)
        h = gru_combine(h, a, params.gru)
    return h


def fuse_pair(h_a: Tensor, h_b: Tensor, params: FusionParams, k: int, mode: str = "full") -> tuple[Tensor, Tensor]:
    """Two fully connected nodes, vectorized over rows.

    Row i of h_a/h_b is an independent two-node graph instance, so a batch
    of paired decoders fuses in one call. Attention over a single neighbor
    normalizes to exactly 1, which keeps this equivalent to fuse() on each
    row (locked by tests).
    """
    if h_a.shape != h_b.shape:
        raise DimensionError(f"fuse_pair shapes differ: {h_a.shape} vs {h_b.shape}")
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if mode == "no_gnn":
        return h_b, h_a
    rounds = 1 if mode == "equal_attention" else k
    if rounds < 1:
        raise ConfigError(f"message-passing rounds must be >= 1, got {k}")
    a, b = h_a, h_b
    kt = dc.transpose(params.kernel)
    for _ in range(rounds):
        msg_to_a = dc.matmul(b, kt, stable=True)
        msg_to_b = dc.matmul(a, kt, stable=True)
        a = gru_combine(a, msg_to_a, params.gru)
        b = gru_combine(b, msg_to_b, params.gru)
    return a, b
