"""Layer specifications and network assembly on top of :mod:`vebm.ops`."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .ops import _triple, conv_geometry
from .tensor import Graph

LAYER_KINDS = ("conv3d", "deconv3d", "fully_connected", "relu", "tanh", "batchnorm3d", "maxpool3d")
INIT_STD = 0.01


@dataclass
class LayerSpec:
    """One layer of a descriptor or generator stack.

    ``stride`` is the sub-sampling factor for conv3d and the up-sampling
    factor for deconv3d; ``kernel`` is the pooling block for maxpool3d.
    A fully_connected layer may ``reshape`` its output to (C, D, H, W).
    """

    kind: str
    out_channels: int | None = None
    kernel: int | tuple[int, int, int] | None = None
    stride: int = 1
    bias: bool = True
    reshape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3d", "deconv3d", "maxpool3d"):
            if self.kernel is None or min(_triple(self.kernel)) < 1:
                raise ValueError(f"{self.kind}: kernel extents must be >= 1")
        if self.stride < 1:
            raise ValueError(f"{self.kind}: stride must be >= 1")
        if self.kind in ("conv3d", "deconv3d", "fully_connected"):
            if self.out_channels is None or self.out_channels < 1:
                raise ValueError(f"{self.kind}: out_channels must be >= 1")
        if self.reshape is not None:
            self.reshape = tuple(int(v) for v in self.reshape)
            if int(np.prod(self.reshape)) != self.out_channels:
                raise ValueError("fully_connected reshape must match out_channels")
        if isinstance(self.kernel, list):
            self.kernel = tuple(self.kernel)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if isinstance(d.get("kernel"), tuple):
            d["kernel"] = list(d["kernel"])
        if "reshape" in d:
            d["reshape"] = list(d["reshape"])
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown layer keys: {sorted(unknown)}")
        return cls(**d)


def conv(c, k, s=1):
    return LayerSpec("conv3d", out_channels=c, kernel=k, stride=s)


def deconv(c, k, up=1):
    return LayerSpec("deconv3d", out_channels=c, kernel=k, stride=up)


def fc(c, bias=True, reshape=None):
    return LayerSpec("fully_connected", out_channels=c, bias=bias, reshape=reshape)


RELU = LayerSpec("relu")
TANH = LayerSpec("tanh")
BN = LayerSpec("batchnorm3d")


def pool(k):
    return LayerSpec("maxpool3d", kernel=k)


@dataclass
class Network:
    """A built stack: graph ids, parameter shapes and per-layer taps."""

    graph: Graph
    input_id: int
    output_id: int
    output_shape: tuple[int, ...]
    param_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    buffer_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    taps: list[int] = field(default_factory=list)
    tap_shapes: list[tuple[int, ...]] = field(default_factory=list)


def build_stack(specs, in_shape, graph=None, input_name="Y", prefix=""):
    """Assemble ``specs`` on an input of per-sample shape ``in_shape``.

    Returns a :class:`Network`; ``taps[i]`` is the output node of layer i.
    """
    g = graph if graph is not None else Graph()
    x = g.input(input_name)
    inp = x
    shape = tuple(in_shape)
    net = Network(g, inp, x, shape)
    for i, spec in enumerate(specs):
        p = f"{prefix}{i}"
        if spec.kind == "conv3d":
            if len(shape) != 4:
                raise ValueError(f"layer {i}: conv3d needs a (C,D,H,W) input, got {shape}")
            k = _triple(spec.kernel)
            wshape = (spec.out_channels, shape[0]) + k
            ids = [x, g.param(f"{p}.weight")]
            net.param_shapes[f"{p}.weight"] = wshape
            if spec.bias:
                ids.append(g.param(f"{p}.bias"))
                net.param_shapes[f"{p}.bias"] = (spec.out_channels,)
            x = g.op("conv3d", *ids, stride=spec.stride)
            out, _ = conv_geometry(shape[1:], k, _triple(spec.stride))
            shape = (spec.out_channels,) + out
        elif spec.kind == "deconv3d":
            if len(shape) != 4:
                raise ValueError(f"layer {i}: deconv3d needs a (C,D,H,W) input, got {shape}")
            k = _triple(spec.kernel)
            wshape = (shape[0], spec.out_channels) + k
            ids = [x, g.param(f"{p}.weight")]
            net.param_shapes[f"{p}.weight"] = wshape
            if spec.bias:
                ids.append(g.param(f"{p}.bias"))
                net.param_shapes[f"{p}.bias"] = (spec.out_channels,)
            x = g.op("deconv3d", *ids, up=spec.stride)
            shape = (spec.out_channels,) + tuple(n * spec.stride for n in shape[1:])
        elif spec.kind == "fully_connected":
            if len(shape) != 1:
                x = g.op("flatten", x)
            fan_in = int(np.prod(shape))
            ids = [x, g.param(f"{p}.weight")]
            net.param_shapes[f"{p}.weight"] = (spec.out_channels, fan_in)
            if spec.bias:
                ids.append(g.param(f"{p}.bias"))
                net.param_shapes[f"{p}.bias"] = (spec.out_channels,)
            x = g.op("linear", *ids)
            shape = (spec.out_channels,)
            if spec.reshape is not None:
                x = g.op("reshape", x, shape=spec.reshape)
                shape = spec.reshape
        elif spec.kind in ("relu", "tanh"):
            x = g.op(spec.kind, x)
        elif spec.kind == "batchnorm3d":
            c = shape[0]
            ids = [x]
            for name in ("scale", "shift"):
                ids.append(g.param(f"{p}.{name}"))
                net.param_shapes[f"{p}.{name}"] = (c,)
            for name in ("running_mean", "running_var"):
                ids.append(g.const(f"{p}.{name}"))
                net.buffer_shapes[f"{p}.{name}"] = (c,)
            x = g.op("batchnorm3d", *ids)
        elif spec.kind == "maxpool3d":
            k = _triple(spec.kernel)
            x = g.op("maxpool3d", x, kernel=k)
            shape = (shape[0],) + tuple(-(-n // kk) for n, kk in zip(shape[1:], k))
        net.taps.append(x)
        net.tap_shapes.append(shape)
    g.outputs = [x]
    net.output_id = x
    net.output_shape = shape
    return net


def init_params(net, rng, std=INIT_STD, dtype=np.float32):
    """Gaussian weights, zero biases, unit batchnorm scale."""
    params = {}
    for name, shape in net.param_shapes.items():
        if name.endswith(".weight"):
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def init_buffers(net, dtype=np.float32):
    bufs = {}
    for name, shape in net.buffer_shapes.items():
        bufs[name] = (np.ones if name.endswith("running_var") else np.zeros)(shape, dtype=dtype)
    return bufs


def update_running_stats(net, buffers, values, momentum=0.9):
    """Blend batch statistics recorded by a training-mode forward into ``buffers``."""
    out = dict(buffers)
    for node in net.graph.nodes:
        if node.kind != "batchnorm3d" or node.id not in values.aux:
            continue
        mean, var = values.aux[node.id]
        rm_name = net.graph.nodes[node.inputs[3]].name
        rv_name = net.graph.nodes[node.inputs[4]].name
        out[rm_name] = (momentum * buffers[rm_name] + (1 - momentum) * mean).astype(buffers[rm_name].dtype)
        out[rv_name] = (momentum * buffers[rv_name] + (1 - momentum) * var).astype(buffers[rv_name].dtype)
    return out
