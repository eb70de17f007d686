"""Shared test oracles, independent of the library's backward pass."""

import numpy as np

from conseq import diffcore as dc
from conseq.diffcore import Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4


def numeric_gradient(fn, arrays: list[np.ndarray], step: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued fn(*arrays)."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # the 1e-6 floor keeps the ratio meaningful where the true gradient is
    # tiny and central differences bottom out in double-precision roundoff
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, arrays: list[np.ndarray], tol: float = REL_TOL, step: float = FD_STEP) -> float:
    """Compare backward() gradients of build(*tensors) against central
    finite differences of its forward value. Returns the worst relative
    error; asserts it is under tol.

    build receives Tensors (requires_grad) and must return a scalar Tensor.
    """
    dc.tape().clear()
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    dc.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    dc.tape().clear()

    def forward(*arrs):
        with dc.no_grad():
            return build(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_gradient(forward, [a.copy() for a in arrays], step=step)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def params_to_arrays(params):
    return [p.data.copy() for p in params]


def fuse_kink_margin(h0: np.ndarray, params, edges: np.ndarray, k: int) -> float:
    """Distance of the attention net's rectifier pre-activations from 0
    over k fusion rounds. Finite differences are only valid away from the
    kinks, so gradient-check instances require a healthy margin.
    """
    from conseq.fusion import DecoderGraph, fuse

    h = h0.copy()
    margin = np.inf
    for _ in range(k):
        m = h @ params.kernel.data.T
        z1 = m @ params.att_w1.data.T + params.att_b1.data
        a1 = np.where(z1 >= 0, z1, 0.01 * z1)
        z2 = a1 @ params.att_w2.data.T + params.att_b2.data
        margin = min(margin, float(np.abs(z1).min()), float(np.abs(z2).min()))
        with dc.no_grad():
            g = DecoderGraph(h.shape[0], edges, 1)
            h = fuse(Tensor(h), g, params).data
    return margin


def kink_safe_instance(make, edges, k, tries: int = 20, threshold: float = 1e-3):
    """Draw (params, h0) instances until the attention pre-activations sit
    clear of the rectifier kinks; returns the first safe instance."""
    for attempt in range(tries):
        params, h0 = make(attempt)
        if fuse_kink_margin(h0, params, edges, k) > threshold:
            return params, h0
    raise AssertionError("no kink-safe gradient-check instance found")


def check_param_gradients(build_loss, params, tol: float = REL_TOL, step: float = FD_STEP) -> float:
    """Gradient check through arbitrary parameter objects.

    build_loss() computes a scalar Tensor from the current parameter
    values; parameters are perturbed in place for the numeric side.
    """
    dc.tape().clear()
    dc.zero_grads(params)
    loss = build_loss()
    dc.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    dc.tape().clear()
    numeric = []
    for p in params:
        g = np.zeros_like(p.data)
        flat_idx = list(np.ndindex(p.data.shape))
        for idx in flat_idx:
            orig = p.data[idx]
            p.data[idx] = orig + step
            with dc.no_grad():
                hi = build_loss().item()
            p.data[idx] = orig - step
            with dc.no_grad():
                lo = build_loss().item()
            p.data[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        numeric.append(g)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"parameter gradient mismatch: worst {worst:.3e}"
    return worst
