"""Block-averaging down-scaling C, its pseudo-inverse C⁻, pyramids and the
1×1×1 histogram used to seed multi-grid sampling.

All operators act on the trailing three axes, so batches pass through.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DESK_LADDER = (4, 2, 2)  # 1 -> 4 -> 8 -> 16
FULL_LADDER = (4, 4, 2, 2, 2)  # 1 -> 4 -> 16 -> 32 -> 64 -> 128


def _check_factor(d):
    if int(d) != d or d < 1:
        raise ValueError(f"scale factor must be a positive integer, got {d}")
    return int(d)


def downscale(Y, d):
    """Average each d×d×d block into one voxel."""
    d = _check_factor(d)
    Y = np.asarray(Y)
    *lead, D, H, W = Y.shape
    if D % d or H % d or W % d:
        raise ValueError(f"grid {(D, H, W)} is not divisible by factor {d}")
    if d == 1:
        return Y.copy()
    blocks = Y.reshape(*lead, D // d, d, H // d, d, W // d, d)
    out = blocks.mean(axis=(-5, -3, -1), dtype=np.float64)
    return out.astype(Y.dtype)


def upscale(Y, d):
    """Replicate each voxel into a constant d×d×d block."""
    d = _check_factor(d)
    Y = np.asarray(Y)
    if d == 1:
        return Y.copy()
    for axis in (-3, -2, -1):
        Y = np.repeat(Y, d, axis=axis)
    return Y


@dataclass(frozen=True)
class GridScaler:
    factor: int = 2

    def __post_init__(self):
        _check_factor(self.factor)

    def down(self, Y):
        return downscale(Y, self.factor)

    def up(self, Y):
        return upscale(Y, self.factor)

    def null_project(self, dY):
        """(I − C⁻C) dY: removes the block-mean component."""
        if self.factor == 1:
            return np.zeros_like(dY)
        return dY - upscale(downscale(dY, self.factor), self.factor)


def build_pyramid(Y, factors):
    """Versions of ``Y`` from 1×1×1 up to the original.

    ``factors`` lists the per-transition scale ratios from coarsest to
    finest, e.g. (4, 2, 2) for 1 → 4 → 8 → 16.
    """
    Y = np.asarray(Y)
    factors = [_check_factor(f) for f in factors]
    size = Y.shape[-3:]
    total = int(np.prod(factors)) if factors else 1
    if any(s != total for s in size):
        raise ValueError(f"factors {factors} reduce {total}³ grids to 1³, but got a {size} grid")
    levels = [Y]
    for f in reversed(factors):
        levels.append(downscale(levels[-1], f))
    return levels[::-1]


def ladder_sizes(factors):
    sizes = [1]
    for f in factors:
        sizes.append(sizes[-1] * f)
    return sizes


@dataclass
class HistogramModel:
    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.edges) != len(self.probs) + 1 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("histogram edges must be strictly increasing, one more than bins")
        if abs(self.probs.sum() - 1.0) > 1e-9 or np.any(self.probs < 0):
            raise ValueError("histogram probabilities must be non-negative and sum to 1")


def fit_histogram(values, bins=32):
    """Empirical histogram with ``bins`` uniform bins over [min, max]."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot fit a histogram to no data")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        half = 5e-4 * max(1.0, abs(lo))
        lo, hi = lo - half, hi + half
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return HistogramModel(edges, counts / counts.sum())


def sample_histogram(model: HistogramModel, rng, n=None):
    """Draw 1×1×1 grids: pick a bin by probability, then uniform inside it."""
    count = 1 if n is None else n
    idx = rng.choice(len(model.probs), size=count, p=model.probs)
    lo, hi = model.edges[idx], model.edges[idx + 1]
    vals = (lo + (hi - lo) * rng.random(count)).astype(np.float32)
    grids = vals.reshape(count, 1, 1, 1)
    return grids[0] if n is None else grids
