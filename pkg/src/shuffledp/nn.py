"""Dense two-layer MLP and multi-head-attention blocks with hand-derived
backward passes.

Everything is float64: downstream invariance tests compare permuted against
unpermuted training trajectories, and float32 drift would drown the signal.
Per-example gradients come from an explicit per-example backward loop so their
sum is exactly the batch gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MlpParams:
    """Two dense layers sharing one elementwise activation.

    Forward: x1 = h(x w1^T + b1), x2 = h(x1 w2^T + b2).
    w1 is (hidden, in), w2 is (out, hidden); the hidden axis is the one the
    permutation machinery reorders.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        h, _ = self.w1.shape
        out, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (out,):
            raise ValueError("inconsistent MLP shapes")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class AttentionParams:
    """Multi-head attention: per head W_q, W_k (d_model, d_k) and W_v
    (d_model, d_v); concatenated heads map through w_o (heads*d_v, d_model)."""

    wq: list
    wk: list
    wv: list
    wo: np.ndarray

    def __post_init__(self) -> None:
        h = len(self.wq)
        if h < 1 or len(self.wk) != h or len(self.wv) != h:
            raise ValueError("need matching non-empty head lists")
        d_m, d_k = self.wq[0].shape
        d_v = self.wv[0].shape[1]
        for i in range(h):
            if self.wq[i].shape != (d_m, d_k) or self.wk[i].shape != (d_m, d_k):
                raise ValueError("all heads must share (d_model, d_k)")
            if self.wv[i].shape != (d_m, d_v):
                raise ValueError("all heads must share (d_model, d_v)")
        if self.wo.shape != (h * d_v, d_m):
            raise ValueError(f"w_o must be ({h * d_v}, {d_m}), got {self.wo.shape}")

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    @property
    def d_v(self) -> int:
        return self.wv[0].shape[1]

    def tensors(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Run the two dense layers; returns (output, cache for backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.w1.shape[1]:
        raise ValueError(f"input dim {x.shape[1]} != {params.w1.shape[1]}")
    z1 = x @ params.w1.T + params.b1
    x1 = _act(params.activation, z1)
    z2 = x1 @ params.w2.T + params.b2
    x2 = _act(params.activation, z2)
    return x2, (x, z1, x1, z2)


def mlp_backward(params: MlpParams, cache, upstream: np.ndarray):
    """Gradients of sum(upstream * output) w.r.t. parameters and input."""
    x, z1, x1, z2 = cache
    upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
    dz2 = upstream * _act_grad(params.activation, z2)
    dw2 = dz2.T @ x1
    db2 = dz2.sum(axis=0)
    dx1 = dz2 @ params.w2
    dz1 = dx1 * _act_grad(params.activation, z1)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ params.w1
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}, dx


def attention_forward(params: AttentionParams, x: np.ndarray):
    """Multi-head attention on one sequence x of shape (seq, d_model)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.wq[0].shape[0]:
        raise ValueError(f"expected (seq, {params.wq[0].shape[0]}), got {x.shape}")
    inv_sqrt_dk = 1.0 / math.sqrt(params.d_k)
    heads = []
    per_head = []
    for i in range(params.heads):
        q = x @ params.wq[i]
        k = x @ params.wk[i]
        v = x @ params.wv[i]
        scores = (q @ k.T) * inv_sqrt_dk
        attn = softmax_rows(scores)
        a = attn @ v
        heads.append(a)
        per_head.append((q, k, v, attn))
    concat = np.concatenate(heads, axis=1)
    out = concat @ params.wo
    return out, (x, per_head, concat)


def attention_backward(params: AttentionParams, cache, upstream: np.ndarray):
    """Gradients of sum(upstream * output) w.r.t. parameters and input."""
    x, per_head, concat = cache
    upstream = np.asarray(upstream, dtype=float)
    d_v = params.d_v
    inv_sqrt_dk = 1.0 / math.sqrt(params.d_k)

    dwo = concat.T @ upstream
    dconcat = upstream @ params.wo.T
    dx = np.zeros_like(x)
    g_wq, g_wk, g_wv = [], [], []
    for i in range(params.heads):
        q, k, v, attn = per_head[i]
        da = dconcat[:, i * d_v : (i + 1) * d_v]
        dattn = da @ v.T
        dv = attn.T @ da
        # softmax jacobian, row-wise
        dscores = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
        dscores *= inv_sqrt_dk
        dq = dscores @ k
        dk = dscores.T @ q
        g_wq.append(x.T @ dq)
        g_wk.append(x.T @ dk)
        g_wv.append(x.T @ dv)
        dx += dq @ params.wq[i].T + dk @ params.wk[i].T + dv @ params.wv[i].T
    return {"wq": g_wq, "wk": g_wk, "wv": g_wv, "wo": dwo}, dx


def grads_l2_norm(grads) -> float:
    """Global l2 norm over one gradient structure (list of per-block dicts)."""
    total = 0.0
    for arr in iter_arrays(grads):
        total += float(np.dot(arr.ravel(), arr.ravel()))
    return math.sqrt(total)


def iter_arrays(grads):
    """Yield every ndarray in a gradient structure in canonical order."""
    if isinstance(grads, np.ndarray):
        yield grads
        return
    if isinstance(grads, dict):
        for key in sorted(grads):
            yield from iter_arrays(grads[key])
        return
    for item in grads:
        yield from iter_arrays(item)


def scale_grads(grads, factor: float) -> None:
    """In-place multiply every array in a gradient structure."""
    for arr in iter_arrays(grads):
        arr *= factor


def add_grads(acc, other) -> None:
    """In-place acc += other over parallel gradient structures."""
    for a, b in zip(iter_arrays(acc), iter_arrays(other)):
        a += b


def zeros_like_grads(grads):
    """Fresh zero-filled structure parallel to `grads`."""
    if isinstance(grads, np.ndarray):
        return np.zeros_like(grads)
    if isinstance(grads, dict):
        return {k: zeros_like_grads(v) for k, v in grads.items()}
    return [zeros_like_grads(item) for item in grads]


@dataclass
class PerSampleGrads:
    """Per-example gradient structures for one minibatch plus their l2 norms."""

    grads: list
    norms: np.ndarray

    def __post_init__(self) -> None:
        if len(self.grads) != len(self.norms):
            raise ValueError("one norm per example required")


def clip_per_sample(psg: PerSampleGrads, c: float) -> PerSampleGrads:
    """Scale each example gradient to l2 norm at most c, preserving direction."""
    if not c > 0:
        raise ValueError(f"clip must be > 0, got {c}")
    clipped = []
    new_norms = np.empty_like(psg.norms)
    for i, g in enumerate(psg.grads):
        scale = 1.0 / max(1.0, psg.norms[i] / c)
        gc = zeros_like_grads(g)
        add_grads(gc, g)
        scale_grads(gc, scale)
        clipped.append(gc)
        new_norms[i] = psg.norms[i] * scale
    return PerSampleGrads(grads=clipped, norms=new_norms)
