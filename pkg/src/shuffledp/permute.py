"""Permutation sampling and invariance-preserving weight shuffles.

Shuffles are pure index gathers -- never permutation-matrix products -- so
they are exact (no float error) and cheap. For an MLP block, one permutation
q of the hidden axis reorders rows of w1, entries of b1, and columns of w2;
the block's function is unchanged because the second layer undoes what the
first introduced. For attention, each head gets its own d_k permutation of
the wq/wk columns (they cancel inside q k^T) and all heads share one d_v
permutation of the wv columns that is undone by gathering rows inside each
head-block of w_o.

The same gather can be applied to any tensor structure shaped like the
block's parameters (weights, gradients, or noise draws), which is what keeps
noisy training trajectories pathwise identical to the unshuffled run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .model import Model, TransformerBlock
from .nn import MlpParams


def sample_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of {0..n-1} (Fisher-Yates via the generator)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return rng.permutation(n)


def inverse_permutation(p: np.ndarray) -> np.ndarray:
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def is_permutation(p: np.ndarray) -> bool:
    p = np.asarray(p)
    return p.ndim == 1 and np.array_equal(np.sort(p), np.arange(p.size))


def apply_mlp_permutation(tensors: dict, q: np.ndarray) -> None:
    """In-place hidden-axis shuffle of an MLP-shaped tensor set.

    tensors holds "w1" (hidden, in), "b1" (hidden,), "w2" (out, hidden),
    "b2" (untouched). Raises on size mismatch.
    """
    w1, b1, w2 = tensors["w1"], tensors["b1"], tensors["w2"]
    if q.size != w1.shape[0] or q.size != w2.shape[1] or q.size != b1.size:
        raise ValueError(f"permutation size {q.size} does not match hidden width")
    w1[:] = w1[q]
    b1[:] = b1[q]
    w2[:] = w2[:, q]


def apply_transformer_permutation(tensors: dict, q1_per_head: list, q2: np.ndarray) -> None:
    """In-place attention shuffle of an attention-shaped tensor set.

    Columns of wq[i]/wk[i] gather by q1_per_head[i]; columns of every wv[i]
    gather by q2; rows of each d_v-sized block of wo gather by the inverse of
    q2 (the same index gather, applied to rows).
    """
    wq, wk, wv, wo = tensors["wq"], tensors["wk"], tensors["wv"], tensors["wo"]
    heads = len(wq)
    if len(q1_per_head) != heads:
        raise ValueError(f"need one d_k permutation per head ({heads})")
    d_v = wv[0].shape[1]
    if q2.size != d_v:
        raise ValueError(f"shared permutation size {q2.size} != d_v {d_v}")
    for i in range(heads):
        q1 = q1_per_head[i]
        if q1.size != wq[i].shape[1]:
            raise ValueError("head permutation size != d_k")
        wq[i][:] = wq[i][:, q1]
        wk[i][:] = wk[i][:, q1]
        wv[i][:] = wv[i][:, q2]
        wo[i * d_v : (i + 1) * d_v] = wo[i * d_v : (i + 1) * d_v][q2]


@dataclass
class InvariantGroup:
    """One jointly-permuted parameter group (an MLP pair or a head set).

    Tracks the composition of every permutation applied so far; fresh tensor
    structures (noise, gradients) can be carried into the group's current
    frame with `apply_current`.
    """

    kind: str
    block: object
    acc_q: np.ndarray = None
    acc_q1: list = None
    acc_q2: np.ndarray = None

    def __post_init__(self) -> None:
        if self.kind == "mlp":
            if not isinstance(self.block, MlpParams):
                raise ValueError("mlp group needs MlpParams")
            self.acc_q = np.arange(self.block.hidden)
        elif self.kind == "transformer":
            if not isinstance(self.block, TransformerBlock):
                raise ValueError("transformer group needs TransformerBlock")
            attn = self.block.attn
            self.acc_q1 = [np.arange(attn.d_k) for _ in range(attn.heads)]
            self.acc_q2 = np.arange(attn.d_v)
        else:
            raise ValueError(f"unknown group kind {self.kind!r}")

    def tensors(self) -> dict:
        return self.block.tensors() if self.kind == "mlp" else self.block.attn.tensors()

    def sample(self, rng: np.random.Generator):
        """Fresh uniform permutation set for this group."""
        if self.kind == "mlp":
            return sample_permutation(self.block.hidden, rng)
        attn = self.block.attn
        q1 = [sample_permutation(attn.d_k, rng) for _ in range(attn.heads)]
        q2 = sample_permutation(attn.d_v, rng)
        return q1, q2

    def apply(self, perm, tensors: dict) -> None:
        """Apply a sampled permutation set to a tensor structure."""
        if self.kind == "mlp":
            apply_mlp_permutation(tensors, perm)
        else:
            q1, q2 = perm
            apply_transformer_permutation(tensors, q1, q2)

    def apply_current(self, tensors: dict) -> None:
        """Carry a canonical-frame tensor structure into the group's frame."""
        if self.kind == "mlp":
            apply_mlp_permutation(tensors, self.acc_q)
        else:
            apply_transformer_permutation(tensors, self.acc_q1, self.acc_q2)

    def shuffle(self, rng: np.random.Generator) -> None:
        """Sample a fresh permutation, apply to the weights, and compose it
        into the accumulated frame."""
        perm = self.sample(rng)
        self.apply(perm, self.tensors())
        if self.kind == "mlp":
            self.acc_q = self.acc_q[perm]
        else:
            q1, q2 = perm
            self.acc_q1 = [a[q] for a, q in zip(self.acc_q1, q1)]
            self.acc_q2 = self.acc_q2[q2]

    def log_permutation_count(self) -> float:
        """log |P_s| for this group (log-factorials of the permuted sizes)."""
        if self.kind == "mlp":
            return float(gammaln(self.block.hidden + 1))
        attn = self.block.attn
        return float(attn.heads * gammaln(attn.d_k + 1) + gammaln(attn.d_v + 1))


def invariant_groups(model: Model) -> list:
    """One InvariantGroup per block; every supported block kind is invariant."""
    groups = []
    for block in model.blocks:
        if isinstance(block, TransformerBlock):
            groups.append(InvariantGroup(kind="transformer", block=block))
        else:
            groups.append(InvariantGroup(kind="mlp", block=block))
    return groups


def log_permutation_count(model: Model) -> float:
    """log |P_s| of the whole model (groups permute independently)."""
    return sum(g.log_permutation_count() for g in invariant_groups(model))


def shuffle_update(
    group: InvariantGroup,
    noisy_grad: dict,
    lr: float,
    rng: np.random.Generator | None,
) -> None:
    """SGD step on the group's weights, then a fresh shuffle of the result.

    `noisy_grad` must already be in the group's current frame. Passing
    rng=None skips the shuffle (frozen-permutation debugging mode).
    """
    tensors = group.tensors()
    for key, grad in noisy_grad.items():
        target = tensors[key]
        if isinstance(target, list):
            for t, g in zip(target, grad):
                t -= lr * g
        else:
            target -= lr * grad
    if rng is not None:
        group.shuffle(rng)
