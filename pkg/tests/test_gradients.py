"""Randomized finite-difference gradient checks for every differentiable
operation, including composite cells and the fused update end to end."""

import numpy as np
import pytest

from conseq import cells
from conseq import diffcore as dc
from conseq.cells import GruParams, LstmParams
from conseq.diffcore import Tensor
from conseq.fusion import DecoderGraph, FusionParams, attention_scores, fuse

from helpers import check_gradients, check_param_gradients, kink_safe_instance

N_INSTANCES = 4  # per op per test run; the acceptance suite runs 20


def rngs(seed):
    return [np.random.default_rng(seed + i) for i in range(N_INSTANCES)]


class TestPrimitiveOps:
    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_matmul(self, seed):
        r = np.random.default_rng(seed)
        check_gradients(lambda a, b: dc.sum_all(dc.matmul(a, b)),
                        [r.normal(size=(3, 4)), r.normal(size=(4, 2))])

    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_matmul_stable(self, seed):
        r = np.random.default_rng(seed)
        check_gradients(lambda a, b: dc.sum_all(dc.matmul(a, b, stable=True)),
                        [r.normal(size=(3, 4)), r.normal(size=(4, 2))])

    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_affine(self, seed):
        r = np.random.default_rng(seed)
        check_gradients(lambda x, w, b: dc.mean_all(dc.affine(x, w, b)),
                        [r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=2)])

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_elementwise(self, op):
        r = np.random.default_rng(hash(op) % 1000)
        fn = getattr(dc, op)
        check_gradients(lambda a, b: dc.mean_all(fn(a, b)),
                        [r.normal(size=(3, 4)), r.normal(size=(3, 4))])

    def test_bias_broadcast(self):
        r = np.random.default_rng(4)
        check_gradients(lambda a, b: dc.mean_all(dc.add(a, b)),
                        [r.normal(size=(3, 4)), r.normal(size=4)])

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp"])
    def test_unary(self, op):
        r = np.random.default_rng(hash(op) % 1000)
        fn = getattr(dc, op)
        check_gradients(lambda a: dc.mean_all(fn(a)), [r.normal(size=(3, 4))])

    def test_leaky_relu(self):
        r = np.random.default_rng(5)
        check_gradients(lambda a: dc.mean_all(dc.leaky_relu(a, 0.01)),
                        [r.normal(size=(3, 4)) + 0.05])  # keep clear of the kink

    def test_scale(self):
        r = np.random.default_rng(6)
        check_gradients(lambda a: dc.sum_all(dc.scale(a, -0.7)), [r.normal(size=(2, 3))])

    def test_softmax(self):
        r = np.random.default_rng(7)
        check_gradients(lambda a: dc.sum_all(dc.mul(dc.softmax(a), a)), [r.normal(size=5)])

    def test_neighbor_softmax(self):
        r = np.random.default_rng(8)
        mask = np.array([[0, 1, 1], [1, 0, 0], [1, 1, 0]], dtype=float)
        weights = r.normal(size=(3, 3))

        def build(s):
            return dc.sum_all(dc.mul(dc.neighbor_softmax(s, mask), Tensor(weights)))

        check_gradients(build, [r.normal(size=3)])

    def test_concat_and_split(self):
        r = np.random.default_rng(9)

        def build(a, b):
            joined = dc.concat(a, b)
            lo, hi = dc.split_cols(joined, 2)
            return dc.mean_all(dc.mul(lo, hi))

        check_gradients(build, [r.normal(size=(2, 2)), r.normal(size=(2, 2))])

    def test_concat_rows(self):
        r = np.random.default_rng(19)
        check_gradients(lambda a, b: dc.mean_all(dc.tanh(dc.concat_rows([a, b]))),
                        [r.normal(size=(2, 3)), r.normal(size=(1, 3))])

    def test_reshape_transpose(self):
        r = np.random.default_rng(10)
        check_gradients(lambda a: dc.sum_all(dc.tanh(dc.transpose(dc.reshape(a, (3, 2))))),
                        [r.normal(size=(2, 3))])

    def test_mse(self):
        r = np.random.default_rng(11)
        tgt = r.normal(size=(2, 3))
        check_gradients(lambda a: dc.mse_loss(a, tgt), [r.normal(size=(2, 3))])

    def test_cross_entropy_batched_weighted(self):
        r = np.random.default_rng(12)
        w = np.array([1.0, 0.0, 2.0])
        ids = np.array([1, 0, 3])
        check_gradients(lambda l: dc.cross_entropy(l, ids, weights=w), [r.normal(size=(3, 4))])

    def test_take_rows(self):
        r = np.random.default_rng(13)
        ids = np.array([0, 2, 2])
        check_gradients(lambda t: dc.mean_all(dc.sigmoid(dc.take_rows(t, ids))),
                        [r.normal(size=(4, 3))])

    def test_lstm_packed(self):
        r = np.random.default_rng(14)

        def build(x, h, c, wi, wh, b):
            return dc.mean_all(dc.lstm_packed(x, h, c, wi, wh, b))

        check_gradients(build, [r.normal(size=(2, 3)), r.normal(size=(2, 4)), r.normal(size=(2, 4)),
                                r.normal(size=(16, 3)), r.normal(size=(16, 4)), r.normal(size=16)])


class TestCompositeCells:
    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_lstm_step(self, seed):
        r = np.random.default_rng(100 + seed)
        p = LstmParams.init(r, 3, 4, "lstm")
        x = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        h = Tensor(r.normal(size=(2, 4)), requires_grad=True)
        c = Tensor(r.normal(size=(2, 4)), requires_grad=True)

        def loss():
            h2, c2 = cells.lstm_step(x, h, c, p)
            return dc.mean_all(dc.add(h2, dc.tanh(c2)))

        check_param_gradients(loss, p.parameters() + [x, h, c])

    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_gru_combine(self, seed):
        r = np.random.default_rng(200 + seed)
        p = GruParams.init(r, 3, "gru")
        h = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        a = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        check_param_gradients(lambda: dc.mean_all(cells.gru_combine(h, a, p)),
                              p.parameters() + [h, a])

    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_attention_scores(self, seed):
        edges = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]])

        def make(attempt):
            r = np.random.default_rng(300 + seed * 100 + attempt)
            return FusionParams.init(r, 4), r.normal(size=(3, 4))

        p, h0 = kink_safe_instance(make, edges, k=1)
        g = DecoderGraph(3, edges, 1)
        h = Tensor(h0, requires_grad=True)
        mix = Tensor(np.random.default_rng(seed).normal(size=(3, 3)))

        def loss():
            w, _ = attention_scores(h, p, g)
            return dc.sum_all(dc.mul(w, mix))

        check_param_gradients(loss, p.parameters() + [h])

    @pytest.mark.parametrize("seed", range(N_INSTANCES))
    def test_fuse_end_to_end_three_nodes(self, seed):
        edges = np.array([[0, 1, 1], [1, 0, 0], [1, 1, 0]])

        def make(attempt):
            r = np.random.default_rng(400 + seed * 100 + attempt)
            return FusionParams.init(r, 3), r.normal(size=(3, 3))

        p, h0 = kink_safe_instance(make, edges, k=2)
        g = DecoderGraph(3, edges, 2)
        h0 = Tensor(h0, requires_grad=True)
        check_param_gradients(lambda: dc.mean_all(fuse(h0, g, p)), p.parameters() + [h0])

    def test_embedding_through_model_head(self):
        r = np.random.default_rng(500)
        table = cells.EmbeddingTable.init(r, 6, 4, "emb")
        w = dc.Parameter(r.normal(size=(3, 4)), "w")
        ids = np.array([1, 5, 1])

        def loss():
            return dc.mean_all(dc.sigmoid(cells.linear(cells.embed(ids, table), w)))

        check_param_gradients(loss, table.parameters() + [w])
