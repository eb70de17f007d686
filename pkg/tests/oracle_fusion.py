"""Literal step-by-step reference for the fusion update, written against the
update equations with plain Python lists and math. No numpy, no shared code
with the library. Used to pin fuse() behavior to 1e-12."""

import math


def _matvec(m, v):
    return [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]


def _lrelu(v, slope=0.01):
    return [x if x >= 0 else slope * x for x in v]


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def attention_score(p, mapped):
    a1 = _lrelu([s + b for s, b in zip(_matvec(p["att_w1"], mapped), p["att_b1"])])
    a2 = _lrelu([s + b for s, b in zip(_matvec(p["att_w2"], a1), p["att_b2"])])
    a3 = [s + b for s, b in zip(_matvec(p["att_w3"], a2), p["att_b3"])]
    return a3[0]


def gru_update(p, h, a):
    d = len(h)
    z = [_sigmoid(x + y + b) for x, y, b in zip(_matvec(p["w_update_in"], a), _matvec(p["w_update_state"], h), p["b_update"])]
    r = [_sigmoid(x + y + b) for x, y, b in zip(_matvec(p["w_reset_in"], a), _matvec(p["w_reset_state"], h), p["b_reset"])]
    rh = [r[i] * h[i] for i in range(d)]
    cand = [math.tanh(x + y + b) for x, y, b in zip(_matvec(p["w_cand_in"], a), _matvec(p["w_cand_state"], rh), p["b_cand"])]
    return [(1.0 - z[i]) * h[i] + z[i] * cand[i] for i in range(d)]


def manual_fuse(h0, edges, p, k):
    """K rounds of attention-weighted message aggregation + GRU update.

    h0: list of node feature lists; edges[v][u] = 1 iff u's messages reach v.
    p: dict of plain nested lists (kernel, att_*, gru weights/biases).
    """
    n = len(h0)
    d = len(h0[0])
    h = [row[:] for row in h0]
    for _ in range(k):
        mapped = [_matvec(p["kernel"], h[u]) for u in range(n)]
        raw = [attention_score(p, mapped[u]) for u in range(n)]
        messages = []
        for v in range(n):
            nbrs = [u for u in range(n) if edges[v][u]]
            if nbrs:
                top = max(raw[u] for u in nbrs)
                exps = {u: math.exp(raw[u] - top) for u in nbrs}
                z = sum(exps.values())
                a_v = [sum((exps[u] / z) * mapped[u][i] for u in nbrs) for i in range(d)]
            else:
                a_v = [0.0] * d
            messages.append(a_v)
        h = [gru_update(p, h[v], messages[v]) for v in range(n)]
    return h


def params_to_lists(fp):
    """Snapshot FusionParams into the plain-list form the oracle consumes."""
    return {
        "kernel": fp.kernel.data.tolist(),
        "att_w1": fp.att_w1.data.tolist(),
        "att_b1": fp.att_b1.data.tolist(),
        "att_w2": fp.att_w2.data.tolist(),
        "att_b2": fp.att_b2.data.tolist(),
        "att_w3": fp.att_w3.data.tolist(),
        "att_b3": fp.att_b3.data.tolist(),
        "w_update_in": fp.gru.w_update_in.data.tolist(),
        "w_update_state": fp.gru.w_update_state.data.tolist(),
        "w_reset_in": fp.gru.w_reset_in.data.tolist(),
        "w_reset_state": fp.gru.w_reset_state.data.tolist(),
        "w_cand_in": fp.gru.w_cand_in.data.tolist(),
        "w_cand_state": fp.gru.w_cand_state.data.tolist(),
        "b_update": fp.gru.b_update.data.tolist(),
        "b_reset": fp.gru.b_reset.data.tolist(),
        "b_cand": fp.gru.b_cand.data.tolist(),
    }
