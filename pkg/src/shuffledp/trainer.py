"""Shuffled DPSGD training loop.

Each step: Poisson-sample a batch, clip per-example gradients to c, accumulate,
then either (shuffled path, taken when the shuffled noise multiplier beats the
plain one) batch-clip to c_prime, add N(0, sigma^2 c^2) noise, divide by the
nominal batch size, update and re-shuffle the weights -- or (fallback) add
N(0, sigma0^2 c^2) noise and update without shuffling.

Three independent RNG streams (sampling, noise, permutation) are spawned from
the config seed, so toggling shuffling never shifts the batch or noise draws.
Noise is always drawn in the canonical (unshuffled) frame and carried into
each group's current frame before use; this makes a shuffled run's loss
trajectory pathwise identical to the unshuffled run with the same seed, which
is exactly the invariance property worth testing. The division uses the
nominal batch size, not the realized Poisson size: a data-dependent divisor
would make the released statistic's sensitivity data-dependent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accountant import Budget, fallback_check, solve_sigma
from .model import Model, TransformerBlock, per_sample_gradients, predict
from .nn import add_grads, clip_per_sample, grads_l2_norm, iter_arrays, scale_grads
from .permute import invariant_groups, shuffle_update


@dataclass
class TrainConfig:
    budget: Budget
    c: float
    c_prime: float
    batch_size: int
    dataset_size: int
    steps: int
    lr: float
    seed: int
    shuffle: bool = True
    loss: str = "xent"
    sigma_override: float | None = None
    # baseline mode: run the plain-DPSGD path at sigma0 even when the
    # shuffled multiplier wins the comparison (paired-budget experiments)
    force_fallback: bool = False
    model_config: dict | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch_size and dataset_size must be positive")
        if self.batch_size > self.dataset_size:
            raise ValueError("batch_size must not exceed dataset_size")
        if self.steps < 1 or self.lr <= 0 or self.c <= 0 or self.c_prime <= 0:
            raise ValueError("steps, lr, c, c_prime must be positive")


@dataclass
class StepRecord:
    step: int
    loss: float
    sigma_used: float
    path: str
    batch_realized: int
    grad_norm_mean: float
    grad_norm_max: float


@dataclass
class TrainResult:
    model: Model
    records: list
    sigma: float
    sigma0: float
    shuffled_path: bool
    groups: list = field(default_factory=list)


def poisson_sample(dataset_size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of one Poisson-sampled batch: each index kept with prob B/N."""
    p = batch_size / dataset_size
    return np.flatnonzero(rng.random(dataset_size) < p)


def batch_clip(g_hat, c_prime: float):
    """Scale the accumulated gradient structure to l2 norm at most c_prime."""
    if not c_prime > 0:
        raise ValueError(f"c_prime must be > 0, got {c_prime}")
    norm = grads_l2_norm(g_hat)
    if norm > c_prime:
        scale_grads(g_hat, c_prime / norm)
    return g_hat


def add_noise(
    g: np.ndarray,
    sigma: float,
    c: float,
    rng: np.random.Generator,
    batch_size: int = 1,
) -> np.ndarray:
    """(g + z) / batch_size with z ~ N(0, sigma^2 c^2 I); sigma=0 is exact."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    g = np.asarray(g, dtype=float)
    if sigma == 0.0:
        return g / batch_size
    return (g + rng.standard_normal(g.shape) * (sigma * c)) / batch_size


def _zero_grads_like(model: Model) -> list:
    grads = []
    for block in model.blocks:
        if isinstance(block, TransformerBlock):
            attn = block.attn
            grads.append(
                {
                    "wq": [np.zeros_like(a) for a in attn.wq],
                    "wk": [np.zeros_like(a) for a in attn.wk],
                    "wv": [np.zeros_like(a) for a in attn.wv],
                    "wo": np.zeros_like(attn.wo),
                }
            )
        else:
            grads.append(
                {
                    "w1": np.zeros_like(block.w1),
                    "b1": np.zeros_like(block.b1),
                    "w2": np.zeros_like(block.w2),
                    "b2": np.zeros_like(block.b2),
                }
            )
    return grads


def _draw_noise_like(structure, sigma_c: float, rng: np.random.Generator):
    """Noise structure parallel to `structure`, drawn in canonical order."""
    noise = _map_structure(structure, lambda a: rng.standard_normal(a.shape) * sigma_c)
    return noise


def _map_structure(obj, fn):
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if isinstance(obj, dict):
        return {k: _map_structure(obj[k], fn) for k in obj}
    return [_map_structure(item, fn) for item in obj]


def make_blobs(n: int, features: int, classes: int, seed: int, spread: float = 1.0, sep: float = 3.0):
    """Synthetic Gaussian-blob classification data."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, sep, size=(classes, features))
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.normal(0.0, spread, size=(n, features))
    return x, y


def load_csv(path):
    """Load (x, y) from a CSV whose last column is the label/target."""
    data = np.genfromtxt(path, delimiter=",", dtype=float)
    data = np.atleast_2d(data)
    x, y = data[:, :-1], data[:, -1]
    if np.allclose(y, np.round(y)):
        y = y.astype(int)
    return x, y


def accuracy(model: Model, x, y) -> float:
    out = predict(model, x)
    return float(np.mean(out.argmax(axis=1) == np.asarray(y)))


def mean_loss(model: Model, x, y, loss: str = "xent") -> float:
    _, losses = per_sample_gradients(model, x, y, loss)
    return float(losses.mean())


def train(config: TrainConfig, model: Model, x, y) -> TrainResult:
    """Run the full shuffled-DPSGD loop; the accountant runs before any data
    access and aborts on an infeasible budget."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != config.dataset_size:
        raise ValueError(f"dataset_size {config.dataset_size} != len(x) {x.shape[0]}")
    p = config.batch_size / config.dataset_size
    d = model.parameter_count()

    if config.sigma_override is not None:
        sigma = sigma0 = float(config.sigma_override)
        shuffled_path = config.shuffle
    else:
        sigma = solve_sigma(
            config.budget, config.c, config.c_prime, d, p, config.steps, shuffled=True
        )
        sigma0 = solve_sigma(
            config.budget, config.c, config.c_prime, d, p, config.steps, shuffled=False
        )
        shuffled_path = fallback_check(sigma, sigma0)
    if config.force_fallback:
        shuffled_path = False

    sample_seed, noise_seed, perm_seed = np.random.SeedSequence(config.seed).spawn(3)
    sample_rng = np.random.default_rng(sample_seed)
    noise_rng = np.random.default_rng(noise_seed)
    perm_rng = np.random.default_rng(perm_seed)

    groups = invariant_groups(model)
    sigma_used = sigma if shuffled_path else sigma0
    path_name = "shuffled" if shuffled_path else "fallback"
    records = []

    for step in range(config.steps):
        idx = poisson_sample(config.dataset_size, config.batch_size, sample_rng)
        g_hat = _zero_grads_like(model)
        if idx.size:
            psg, losses = per_sample_gradients(model, x[idx], [y[i] for i in idx], config.loss)
            clipped = clip_per_sample(psg, config.c)
            for g in clipped.grads:
                add_grads(g_hat, g)
            loss_val = float(losses.mean())
            norm_mean = float(clipped.norms.mean())
            norm_max = float(clipped.norms.max())
        else:
            loss_val = math.nan
            norm_mean = norm_max = 0.0

        if shuffled_path:
            batch_clip(g_hat, config.c_prime)
            noise = _draw_noise_like(g_hat, sigma_used * config.c, noise_rng)
            if config.shuffle:
                for group, block_noise in zip(groups, noise):
                    group.apply_current(block_noise)
            for block_g, block_z in zip(g_hat, noise):
                for a, z in zip(iter_arrays(block_g), iter_arrays(block_z)):
                    a += z
                    a /= config.batch_size
            for group, block_g in zip(groups, g_hat):
                shuffle_update(group, block_g, config.lr, perm_rng if config.shuffle else None)
        else:
            noise = _draw_noise_like(g_hat, sigma_used * config.c, noise_rng)
            for block_g, block_z in zip(g_hat, noise):
                for a, z in zip(iter_arrays(block_g), iter_arrays(block_z)):
                    a += z
                    a /= config.batch_size
            for group, block_g in zip(groups, g_hat):
                shuffle_update(group, block_g, config.lr, None)

        records.append(
            StepRecord(
                step=step,
                loss=loss_val,
                sigma_used=sigma_used,
                path=path_name,
                batch_realized=int(idx.size),
                grad_norm_mean=norm_mean,
                grad_norm_max=norm_max,
            )
        )

    return TrainResult(
        model=model,
        records=records,
        sigma=sigma,
        sigma0=sigma0,
        shuffled_path=shuffled_path,
        groups=groups,
    )
