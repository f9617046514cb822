"""Langevin samplers for the descriptor: plain, masked-conditional and
null-space-projected (super-resolution).

One step is

    Y' = Y − (Δτ/2)·(Y/s² − ∂f/∂Y) + √Δτ·ε,    ε ~ N(0, I)

with ε dropped when noise is disabled. Each chain draws its noise from its
own generator, so chains are reproducible individually.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import hopfield_residual
from .gridops import GridScaler

DIVERGENCE_LIMIT = 1e3

# (K, Δτ) pairs used across the experiments
PRESETS = {
    "synthesis": (20, 0.01),
    "recovery": (90, 0.0049),
    "superres": (90, 0.0001),
    "coop": (20, 0.09),
    "multigrid": (20, 0.01),
    "single-grid-128": (20, 0.0025),
}


class LangevinDivergence(FloatingPointError):
    def __init__(self, step, worst):
        self.step = step
        self.worst = worst
        super().__init__(f"Langevin chain diverged at step {step} (max |voxel| = {worst:.3g})")


@dataclass
class LangevinConfig:
    step_size: float = 0.01
    steps: int = 20
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("Langevin step size must be > 0")
        if self.steps < 0:
            raise ValueError("Langevin step count must be >= 0")

    @classmethod
    def preset(cls, name, **kw):
        k, dt = PRESETS[name]
        return cls(step_size=dt, steps=k, **kw)


def chain_rngs(seed, n, *stream):
    """One generator per chain, keyed by (seed, *stream, chain index)."""
    return [np.random.default_rng([int(seed), *map(int, stream), i]) for i in range(n)]


def _noise(rng, shape):
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape, dtype=np.float32)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} chain generators for {shape[0]} chains")
    return np.stack([r.standard_normal(shape[1:], dtype=np.float32) for r in rng])


def langevin_delta(model, Y, cfg: LangevinConfig, rng=None, noise=None):
    """The change ΔY proposed by one step."""
    noise = cfg.noise if noise is None else noise
    dt = np.float32(cfg.step_size)
    dY = -(dt / 2) * hopfield_residual(model, Y)
    if noise:
        if rng is None:
            raise ValueError("noise is enabled but no random generator was supplied")
        dY = dY + np.sqrt(dt) * _noise(rng, Y.shape)
    return dY


def _guard(Y, step):
    finite = np.isfinite(Y)
    worst = float(np.max(np.abs(Y[finite]))) if finite.any() else float("inf")
    if not finite.all() or worst > DIVERGENCE_LIMIT:
        raise LangevinDivergence(step, worst if finite.all() else float("inf"))
    return Y


def langevin_step(model, Y, cfg: LangevinConfig, rng=None, noise=None, step=0):
    Y = np.asarray(Y, dtype=np.float32)
    return _guard(Y + langevin_delta(model, Y, cfg, rng, noise), step)


def conditional_step(model, Y, mask, cfg: LangevinConfig, rng=None, noise=None, step=0):
    """Langevin step on the free voxels (mask True); observed voxels stay put."""
    Y = np.asarray(Y, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != Y.shape:
        mask = np.broadcast_to(mask, Y.shape) if mask.shape == Y.shape[1:] else None
        if mask is None:
            raise ValueError("mask shape does not match the voxel batch")
    out = np.where(mask, Y + langevin_delta(model, Y, cfg, rng, noise), Y)
    return _guard(out, step)


def projected_step(model, Y, scaler: GridScaler, cfg: LangevinConfig, rng=None, noise=None, step=0):
    """Langevin step with ΔY projected onto the null space of the block mean."""
    Y = np.asarray(Y, dtype=np.float32)
    d = scaler.factor
    if any(n % d for n in Y.shape[-3:]):
        raise ValueError(f"grid {Y.shape[-3:]} not divisible by factor {d}")
    if d == 1:
        return Y.copy()
    dY = langevin_delta(model, Y, cfg, rng, noise)
    return _guard(Y + scaler.null_project(dY), step)


def run_chain(model, Y0, cfg: LangevinConfig, rng=None, noise=None, mask=None, scaler=None):
    """K steps from ``Y0``; ``mask`` or ``scaler`` select the constrained samplers.

    Without an explicit ``rng``, per-chain generators derive from ``cfg.seed``.
    """
    Y = np.array(Y0, dtype=np.float32)
    noise = cfg.noise if noise is None else noise
    if noise and rng is None:
        rng = chain_rngs(cfg.seed, Y.shape[0])
    for k in range(cfg.steps):
        if mask is not None:
            Y = conditional_step(model, Y, mask, cfg, rng, noise, step=k)
        elif scaler is not None:
            Y = projected_step(model, Y, scaler, cfg, rng, noise, step=k)
        else:
            Y = langevin_step(model, Y, cfg, rng, noise, step=k)
    return Y
