"""The descriptor density p(Y) ∝ exp(f(Y)) · N(0, s²I).

Voxel batches are float32 arrays shaped (N, D, H, W); the network sees a
single input channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import RELU, LayerSpec, Network, build_stack, conv, fc, init_params
from .tensor import backward, forward

# name -> (grid extent, layers); every stack ends in a bias-free scalar head
ARCHITECTURES: dict[str, tuple[int, list[LayerSpec]]] = {
    "paper-synthesis-32": (32, [conv(200, 16, 3), RELU, conv(100, 6, 2), RELU, fc(1, bias=False)]),
    "paper-recovery-2layer": (32, [conv(100, 16, 3), RELU, fc(1, bias=False)]),
    "paper-superres-64": (64, [conv(200, 16, 3), RELU, fc(1, bias=False)]),
    "paper-coop-32": (
        32,
        [conv(64, 9, 2), RELU, conv(128, 7, 2), RELU, conv(256, 4, 2), RELU, fc(1, bias=False)],
    ),
    "paper-grid1-4": (4, [conv(128, 4, 1), RELU, fc(1, bias=False)]),
    "paper-grid2-16": (16, [conv(256, 8, 2), RELU, fc(1, bias=False)]),
    "paper-grid3-32": (32, [conv(256, 16, 3), RELU, conv(128, 6, 2), RELU, fc(1, bias=False)]),
    "paper-grid4-64": (64, [conv(256, 16, 3), RELU, conv(128, 6, 2), RELU, fc(1, bias=False)]),
    "paper-grid5-128": (128, [conv(256, 16, 4), RELU, conv(128, 8, 2), RELU, fc(1, bias=False)]),
    "desk-synthesis-16": (16, [conv(32, 5, 2), RELU, conv(64, 3, 2), RELU, fc(1, bias=False)]),
    "desk-recovery-16": (16, [conv(32, 5, 2), RELU, conv(64, 3, 2), RELU, fc(1, bias=False)]),
    "desk-superres-16": (16, [conv(32, 4, 2), RELU, conv(64, 3, 2), RELU, fc(1, bias=False)]),
    "desk-coop-16": (16, [conv(32, 5, 2), RELU, conv(64, 3, 2), RELU, fc(1, bias=False)]),
    "desk-grid1-4": (4, [conv(16, 2, 1), RELU, fc(1, bias=False)]),
    "desk-grid2-8": (8, [conv(16, 4, 2), RELU, fc(1, bias=False)]),
    "desk-grid3-16": (16, [conv(32, 5, 2), RELU, conv(64, 3, 2), RELU, fc(1, bias=False)]),
}


def architecture(name):
    try:
        size, layers = ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture preset {name!r}; known: {sorted(ARCHITECTURES)}") from None
    return size, [LayerSpec(**vars(l)) for l in layers]


@dataclass
class DescriptorModel:
    layers: list[LayerSpec]
    grid_shape: tuple[int, int, int]
    ref_std: float = 0.5
    params: dict[str, np.ndarray] = field(default_factory=dict)
    net: Network = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.ref_std <= 0:
            raise ValueError("reference std must be positive")
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.net = build_stack(self.layers, (1,) + self.grid_shape)
        if self.net.output_shape != (1,):
            raise ValueError(f"descriptor must end in a scalar head, got output {self.net.output_shape}")
        g = self.net.graph
        self.score_id = g.op("reshape", self.net.output_id, shape=())
        self.sumsq_id = g.op("sumsq_per_sample", self.net.input_id)
        ref = g.op("scale", self.sumsq_id, c=1.0 / (2 * self.ref_std**2))
        self.energy_id = g.op("sub", ref, self.score_id)
        missing = set(self.net.param_shapes) - set(self.params)
        if missing and self.params:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        if not self.params:
            self.params = {k: np.zeros(s, np.float32) for k, s in self.net.param_shapes.items()}

    @classmethod
    def create(cls, layers, grid_shape, ref_std=0.5, rng=None, init_std=0.01):
        model = cls(list(layers), grid_shape, ref_std)
        rng = rng if rng is not None else np.random.default_rng(0)
        model.params = init_params(model.net, rng, init_std)
        return model

    @classmethod
    def from_preset(cls, name, ref_std=0.5, rng=None):
        size, layers = architecture(name)
        return cls.create(layers, (size,) * 3, ref_std, rng)

    @property
    def graph(self):
        return self.net.graph

    def with_params(self, params):
        return DescriptorModel(self.layers, self.grid_shape, self.ref_std, dict(params))

    def _forward(self, Y):
        Y = np.asarray(Y, dtype=np.float32)
        if Y.shape[1:] != self.grid_shape:
            raise ValueError(f"voxel batch has shape {Y.shape}, model expects (N, {', '.join(map(str, self.grid_shape))})")
        bindings = {"Y": Y[:, None]}
        bindings.update(self.params)
        return forward(self.graph, bindings)


def score(model: DescriptorModel, Y):
    """f(Y_i; θ) for each element of the batch."""
    return model._forward(Y)[model.score_id]


def energy(model: DescriptorModel, Y):
    """E(Y) = ‖Y‖²/(2s²) − f(Y) per element."""
    return model._forward(Y)[model.energy_id]


def score_grad_input(model: DescriptorModel, Y):
    """∂f/∂Y, shaped like ``Y``."""
    vals = model._forward(Y)
    n = vals[model.score_id].shape[0]
    g = backward(model.graph, vals, model.score_id, np.ones(n, np.float32), wrt=["Y"])
    return g[model.net.input_id][:, 0]


def hopfield_residual(model: DescriptorModel, Y):
    """Y/s² − ∂f/∂Y, i.e. the energy gradient; zero at critical points."""
    Y = np.asarray(Y, dtype=np.float32)
    return Y / np.float32(model.ref_std**2) - score_grad_input(model, Y)


energy_grad_input = hopfield_residual


def score_param_grad(model: DescriptorModel, Y, weight=None):
    """Σ_i w_i ∂f(Y_i)/∂θ (w defaults to 1/N) plus the scores themselves."""
    vals = model._forward(Y)
    s = vals[model.score_id]
    n = s.shape[0]
    w = np.full(n, 1.0 / n, np.float32) if weight is None else np.asarray(weight, np.float32)
    g = backward(model.graph, vals, model.score_id, w, wrt=list(model.params))
    ids = model.graph.params()
    grads = {name: g.get(i, np.zeros_like(model.params[name])) for name, i in ids.items()}
    return grads, s, vals[model.sumsq_id]
