"""Models composed of MLP and transformer-attention blocks.

A model maps a flat feature vector through a block list. Attention blocks
reshape the vector to (seq, d_model), run multi-head attention, and flatten
back; MLP blocks consume the vector directly. The final block's output is the
prediction (logits for cross-entropy, values for squared error).

Configs are JSON or TOML documents:

    {"input_dim": 16, "seed": 3,
     "blocks": [
        {"kind": "transformer", "seq": 4, "d_model": 4, "heads": 2,
         "d_k": 4, "d_v": 4},
        {"kind": "mlp", "hidden": 32, "out": 2, "activation": "identity"}]}

Weight files are flat binary, little-endian:
    magic b"SDPW" | u32 version | u32 tensor count |
    per tensor: u16 name length | utf-8 name | u32 ndim | u32 dims... |
                float64 row-major data
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (
    AttentionParams,
    MlpParams,
    PerSampleGrads,
    attention_backward,
    attention_forward,
    grads_l2_norm,
    mlp_backward,
    mlp_forward,
)

WEIGHTS_MAGIC = b"SDPW"
WEIGHTS_VERSION = 1


@dataclass
class TransformerBlock:
    """Attention block plus the (seq, d_model) view it applies to the input."""

    attn: AttentionParams
    seq: int
    d_model: int

    @property
    def width(self) -> int:
        return self.seq * self.d_model


@dataclass
class Model:
    blocks: list
    input_dim: int

    def block_output_dim(self, idx: int) -> int:
        b = self.blocks[idx]
        return b.width if isinstance(b, TransformerBlock) else b.w2.shape[0]

    @property
    def output_dim(self) -> int:
        return self.block_output_dim(len(self.blocks) - 1)

    def parameter_count(self) -> int:
        n = 0
        for block in self.blocks:
            tensors = block.attn.tensors() if isinstance(block, TransformerBlock) else block.tensors()
            for v in tensors.values():
                if isinstance(v, list):
                    n += sum(a.size for a in v)
                else:
                    n += v.size
        return n


def build_model(config: dict) -> Model:
    """Instantiate a model from a config dict with seeded random init."""
    input_dim = int(config["input_dim"])
    rng = np.random.default_rng(int(config.get("seed", 0)))
    blocks = []
    width = input_dim
    for spec in config["blocks"]:
        kind = spec["kind"]
        if kind == "mlp":
            hidden, out = int(spec["hidden"]), int(spec["out"])
            act = spec.get("activation", "relu")
            w1 = rng.normal(0.0, math.sqrt(2.0 / width), size=(hidden, width))
            w2 = rng.normal(0.0, math.sqrt(2.0 / hidden), size=(out, hidden))
            blocks.append(
                MlpParams(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(out), activation=act)
            )
            width = out
        elif kind == "transformer":
            seq, d_m = int(spec["seq"]), int(spec["d_model"])
            if seq * d_m != width:
                raise ValueError(
                    f"transformer block needs seq*d_model == {width}, got {seq}*{d_m}"
                )
            h, d_k, d_v = int(spec["heads"]), int(spec["d_k"]), int(spec["d_v"])
            sd = math.sqrt(1.0 / d_m)
            attn = AttentionParams(
                wq=[rng.normal(0.0, sd, size=(d_m, d_k)) for _ in range(h)],
                wk=[rng.normal(0.0, sd, size=(d_m, d_k)) for _ in range(h)],
                wv=[rng.normal(0.0, sd, size=(d_m, d_v)) for _ in range(h)],
                wo=rng.normal(0.0, math.sqrt(1.0 / (h * d_v)), size=(h * d_v, d_m)),
            )
            blocks.append(TransformerBlock(attn=attn, seq=seq, d_model=d_m))
        else:
            raise ValueError(f"unknown block kind {kind!r}")
    return Model(blocks=blocks, input_dim=input_dim)


def load_model_config(path) -> dict:
    """Read a model config from a .json or .toml file."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(text.decode())
    return json.loads(text.decode())


def forward_sample(model: Model, x: np.ndarray):
    """Forward one example vector through every block; returns (out, caches)."""
    caches = []
    cur = np.asarray(x, dtype=float).ravel()
    for block in model.blocks:
        if isinstance(block, TransformerBlock):
            out, cache = attention_forward(block.attn, cur.reshape(block.seq, block.d_model))
            cur = out.ravel()
        else:
            out, cache = mlp_forward(block, cur[None, :])
            cur = out[0]
        caches.append(cache)
    return cur, caches


def backward_sample(model: Model, caches, dout: np.ndarray):
    """Backward one example; returns the per-block gradient structure."""
    grads = [None] * len(model.blocks)
    cur = np.asarray(dout, dtype=float).ravel()
    for idx in range(len(model.blocks) - 1, -1, -1):
        block = model.blocks[idx]
        if isinstance(block, TransformerBlock):
            g, dx = attention_backward(
                block.attn, caches[idx], cur.reshape(block.seq, block.d_model)
            )
            cur = dx.ravel()
        else:
            g, dx = mlp_backward(block, caches[idx], cur[None, :])
            cur = dx[0]
        grads[idx] = g
    return grads


def xent_loss(logits: np.ndarray, label: int):
    """Softmax cross-entropy for one example; returns (loss, dlogits)."""
    z = logits - logits.max()
    logp = z - math.log(np.exp(z).sum())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    return -float(logp[label]), dlogits


def squared_error_loss(output: np.ndarray, target):
    """0.5 * ||output - target||^2 for one example; returns (loss, doutput)."""
    diff = output - np.asarray(target, dtype=float).ravel()
    return 0.5 * float(diff @ diff), diff


LOSSES = {"xent": xent_loss, "mse": squared_error_loss}


def per_sample_gradients(model: Model, batch_x: np.ndarray, batch_y, loss="xent"):
    """Per-example gradients and mean loss over a minibatch.

    Returns (PerSampleGrads, losses array). Summing the per-example gradients
    reproduces the batch-sum gradient: each example is backpropagated on its
    own and no cross-example reduction happens before the caller accumulates.
    """
    loss_fn = LOSSES[loss] if isinstance(loss, str) else loss
    batch_x = np.atleast_2d(np.asarray(batch_x, dtype=float))
    grads = []
    norms = np.empty(batch_x.shape[0])
    losses = np.empty(batch_x.shape[0])
    for i in range(batch_x.shape[0]):
        out, caches = forward_sample(model, batch_x[i])
        losses[i], dout = loss_fn(out, batch_y[i])
        g = backward_sample(model, caches, dout)
        norms[i] = grads_l2_norm(g)
        grads.append(g)
    return PerSampleGrads(grads=grads, norms=norms), losses


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Forward a batch; returns (n, output_dim) outputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.stack([forward_sample(model, row)[0] for row in x])


def named_tensors(model: Model) -> list:
    """Flat (name, array) list in canonical block order."""
    out = []
    for bi, block in enumerate(model.blocks):
        if isinstance(block, TransformerBlock):
            for i in range(block.attn.heads):
                out.append((f"block{bi}.wq{i}", block.attn.wq[i]))
                out.append((f"block{bi}.wk{i}", block.attn.wk[i]))
                out.append((f"block{bi}.wv{i}", block.attn.wv[i]))
            out.append((f"block{bi}.wo", block.attn.wo))
        else:
            for name in ("w1", "b1", "w2", "b2"):
                out.append((f"block{bi}.{name}", getattr(block, name)))
    return out


def save_weights(path, model: Model) -> None:
    """Write all tensors in the documented flat binary layout."""
    tensors = named_tensors(model)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
        for name, arr in tensors:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path, model: Model) -> None:
    """Load tensors saved by `save_weights` into `model` (shapes must match)."""
    expected = dict(named_tensors(model))
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise ValueError("not a weights file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8")
            if name not in expected:
                raise ValueError(f"unexpected tensor {name!r}")
            if expected[name].shape != shape:
                raise ValueError(f"shape mismatch for {name!r}")
            expected[name][...] = data.reshape(shape)
