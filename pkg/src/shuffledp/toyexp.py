"""Grid-evaluated densities of shuffled vs unshuffled Gaussians.

A shuffled Gaussian centered at y is the uniform mixture of Gaussians over
the distinct permutations of y. Mixing spreads each center's mass across its
permutation orbit, pulling the densities of two different centers closer
together; `mixture_distance` measures that as the Frobenius norm of the
difference of two grid-sampled densities (raw grid values, no cell-area
weighting, so the number scales with resolution -- compare ratios, not
absolutes).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

MAX_ENUM_DIM = 8


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    points_per_axis: int

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.points_per_axis < 3:
            raise ValueError("need at least 3 points per axis")

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points_per_axis)


def distinct_permutations(vec) -> np.ndarray:
    """All distinct orderings of `vec`, deduplicated for repeated entries."""
    vec = np.asarray(vec, dtype=float)
    if vec.ndim != 1:
        raise ValueError("need a 1-D vector")
    if vec.size > MAX_ENUM_DIM:
        raise ValueError(
            f"permutation enumeration limited to dimension {MAX_ENUM_DIM}, got {vec.size}"
        )
    seen = sorted(set(itertools.permutations(vec.tolist())))
    return np.array(seen, dtype=float)


def gaussian_pdf(center, sigma: float, at) -> float:
    """Isotropic Gaussian density N(at; center, sigma^2 I)."""
    center = np.asarray(center, dtype=float)
    at = np.asarray(at, dtype=float)
    if center.shape != at.shape:
        raise ValueError("center and evaluation point must share a shape")
    dim = center.size
    norm = (2.0 * math.pi * sigma * sigma) ** (dim / 2.0)
    sq = float(np.sum((at - center) ** 2))
    return math.exp(-sq / (2.0 * sigma * sigma)) / norm


def shuffled_gaussian_pdf(y_center, sigma: float, at) -> float:
    """Density of the shuffled Gaussian: uniform mixture over the distinct
    permutations of the center. A center with all-equal entries degenerates to
    the plain Gaussian (its orbit is a single point)."""
    perms = distinct_permutations(y_center)
    return float(np.mean([gaussian_pdf(p, sigma, at) for p in perms]))


def density_grid(center, sigma: float, grid: GridSpec, shuffled: bool) -> np.ndarray:
    """Density values of the (shuffled) Gaussian on a 2-D grid.

    Rows index y, columns index x; only 2-D centers are supported since the
    output is a matrix.
    """
    center = np.asarray(center, dtype=float)
    if center.shape != (2,):
        raise ValueError(f"need a 2-D center, got shape {center.shape}")
    axis = grid.axis()
    xs, ys = np.meshgrid(axis, axis)
    centers = distinct_permutations(center) if shuffled else center[None, :]
    norm = 2.0 * math.pi * sigma * sigma
    out = np.zeros_like(xs)
    for cx, cy in centers:
        out += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma)) / norm
    out /= centers.shape[0]
    return out


def mixture_distance(c1, c2, sigma: float, grid: GridSpec, shuffled: bool) -> float:
    """Frobenius norm of the difference of two grid-sampled densities."""
    p = density_grid(c1, sigma, grid, shuffled)
    q = density_grid(c2, sigma, grid, shuffled)
    return float(np.linalg.norm(p - q))
