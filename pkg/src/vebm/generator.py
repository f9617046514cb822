"""Top-down generator Y = g(Z; α) + ε with a deconvolution stack and tanh output."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BN, RELU, TANH, LayerSpec, Network, build_stack, deconv, fc, init_buffers, init_params, update_running_stats
from .tensor import backward, forward

# name -> (latent dim, grid extent, layers)
GENERATORS: dict[str, tuple[int, int, list[LayerSpec]]] = {
    "desk-16": (
        32,
        16,
        [fc(64 * 4**3, reshape=(64, 4, 4, 4)), BN, RELU, deconv(32, 4, 2), BN, RELU, deconv(1, 4, 2), TANH],
    ),
    "paper-32": (
        100,
        32,
        [
            fc(256 * 4**3, reshape=(256, 4, 4, 4)),
            BN,
            RELU,
            deconv(256, 4, 1),
            BN,
            RELU,
            deconv(128, 4, 2),
            BN,
            RELU,
            deconv(64, 4, 2),
            BN,
            RELU,
            deconv(1, 4, 2),
            TANH,
        ],
    ),
}


def generator_preset(name):
    try:
        d, size, layers = GENERATORS[name]
    except KeyError:
        raise KeyError(f"unknown generator preset {name!r}; known: {sorted(GENERATORS)}") from None
    return d, size, [LayerSpec(**vars(l)) for l in layers]


@dataclass
class GeneratorModel:
    layers: list[LayerSpec]
    latent_dim: int
    grid_shape: tuple[int, int, int]
    noise_std: float = 0.3
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    net: Network = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        if self.latent_dim < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.latent_dim >= int(np.prod(self.grid_shape)):
            raise ValueError("latent dimension must be smaller than the voxel count")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        self.net = build_stack(self.layers, (self.latent_dim,), input_name="Z")
        if self.net.output_shape != (1,) + self.grid_shape:
            raise ValueError(f"generator produces {self.net.output_shape}, target is (1, {self.grid_shape})")
        if not self.params:
            self.params = {k: np.zeros(s, np.float32) for k, s in self.net.param_shapes.items()}
        if not self.buffers:
            self.buffers = init_buffers(self.net)

    @classmethod
    def create(cls, layers, latent_dim, grid_shape, noise_std=0.3, rng=None, init_std=0.01):
        model = cls(list(layers), latent_dim, grid_shape, noise_std)
        rng = rng if rng is not None else np.random.default_rng(0)
        model.params = init_params(model.net, rng, init_std)
        return model

    @classmethod
    def from_preset(cls, name, noise_std=0.3, rng=None, init_std=0.01):
        d, size, layers = generator_preset(name)
        return cls.create(layers, d, (size,) * 3, noise_std, rng, init_std)

    def _bind(self, Z):
        Z = np.asarray(Z, dtype=np.float32)
        if Z.ndim == 1:
            Z = Z[None]
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"latent vectors have dim {Z.shape[1]}, model expects {self.latent_dim}")
        b = {"Z": Z}
        b.update(self.params)
        b.update(self.buffers)
        return b

    def forward_train(self, Z):
        """Training-mode forward (batch statistics); returns graph values."""
        return forward(self.net.graph, self._bind(Z), training=True)


def sample_prior(d, rng, n=None):
    """Z ~ N(0, I_d); a single vector, or ``n`` rows."""
    if d < 1:
        raise ValueError("latent dimension must be >= 1")
    shape = (d,) if n is None else (n, d)
    return rng.standard_normal(shape).astype(np.float32)


def generate(model: GeneratorModel, Z, rng=None, add_noise=False):
    """g(Z; α) with batchnorm in inference mode, plus N(0, σ²) noise if asked.

    A 1-D ``Z`` yields a single (D, H, W) grid, a 2-D ``Z`` a batch.
    """
    single = np.ndim(Z) == 1
    vals = forward(model.net.graph, model._bind(Z))
    Y = vals[model.net.output_id][:, 0]
    if add_noise:
        if rng is None:
            raise ValueError("add_noise requires a random generator")
        Y = Y + np.float32(model.noise_std) * rng.standard_normal(Y.shape, dtype=np.float32)
    return Y[0] if single else Y


def interpolate(model: GeneratorModel, Z0, Z1, rhos=None):
    """Noiseless g((1−ρ)Z0 + ρZ1) for each ρ (default: 8 evenly spaced values)."""
    rhos = np.linspace(0.0, 1.0, 8) if rhos is None else np.asarray(rhos, dtype=np.float64)
    if np.any((rhos < 0) | (rhos > 1)):
        raise ValueError("interpolation weights must lie in [0, 1]")
    Z0 = np.asarray(Z0, np.float32)
    Z1 = np.asarray(Z1, np.float32)
    frames = []
    for r in rhos:
        Z = Z0 if r == 0 else Z1 if r == 1 else ((1 - r) * Z0 + r * Z1).astype(np.float32)
        frames.append(generate(model, Z))
    return frames


def latent_arithmetic(model: GeneratorModel, Za, Zb, Zc):
    Za, Zb, Zc = (np.asarray(z, np.float32) for z in (Za, Zb, Zc))
    if not Za.shape == Zb.shape == Zc.shape:
        raise ValueError("latent vectors must share a shape")
    return generate(model, Za - Zb + Zc)


def regression_grad(model: GeneratorModel, Z, target, values=None):
    """Gradient of (1/ñ)Σ‖target_i − g(Z_i)‖² wrt α, training-mode batchnorm.

    Returns ``(grads, loss_per_voxel, values)``; ``values`` carries the batch
    statistics for the running-average update.
    """
    vals = values if values is not None else model.forward_train(Z)
    out = vals[model.net.output_id][:, 0]
    target = np.asarray(target, dtype=np.float32)
    if target.shape != out.shape:
        raise ValueError(f"regression target shape {target.shape} != generator output {out.shape}")
    n = out.shape[0]
    resid = out - target
    seed = (2.0 / n) * resid[:, None]
    g = backward(model.net.graph, vals, model.net.output_id, seed.astype(np.float32), wrt=list(model.params))
    ids = model.net.graph.params()
    grads = {name: g.get(i, np.zeros_like(model.params[name])) for name, i in ids.items()}
    loss = float(np.mean(np.square(resid, dtype=np.float64)))
    return grads, loss, vals


def refresh_buffers(model: GeneratorModel, values, momentum=0.9):
    return update_running_stats(model.net, model.buffers, values, momentum)
