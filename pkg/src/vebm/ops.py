"""Differentiable op vocabulary for :mod:`vebm.tensor` graphs.

Volumes are laid out (N, C, D, H, W). Convolutions use SAME-style zero
padding: the output extent along an axis is ``ceil(n / stride)`` and the
padding total ``max((out - 1) * stride + k - n, 0)`` is split with the odd
voxel after. ``deconv3d`` is the exact adjoint of ``conv3d`` with the same
kernel, mapping extent ``n`` to ``n * up``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(name):
    def deco(cls):
        OPS[name] = OpDef(cls.forward, cls.backward)
        return cls

    return deco


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 extents, got {v!r}")
    return t


def same_geometry(n, k, s):
    """(out, pad_before, pad_after) for one axis under SAME padding."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def conv_geometry(spatial, kernel, stride):
    geo = [same_geometry(n, k, s) for n, k, s in zip(spatial, kernel, stride)]
    out = tuple(g[0] for g in geo)
    pads = tuple((g[1], g[2]) for g in geo)
    return out, pads


def _pad(x, pads):
    if all(p == (0, 0) for p in pads):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0)) + pads)


def _crop(xp, pads, spatial):
    (a, _), (b, _), (c, _) = pads
    D, H, W = spatial
    return xp[:, :, a : a + D, b : b + H, c : c + W]


def _sum64(x, axis):
    return x.sum(axis=axis, dtype=np.float64).astype(x.dtype)


def _conv_patches(x, kernel, stride):
    out, pads = conv_geometry(x.shape[2:], kernel, stride)
    xp = _pad(x, pads)
    cols = kernels.im2col3d(xp, kernel, stride, out)
    return cols, out, pads, xp.shape[2:]


def _scatter_patches(cols, padded_spatial, stride, pads, spatial, dtype):
    acc = kernels.col2im3d(cols, padded_spatial, stride)
    return np.ascontiguousarray(_crop(acc, pads, spatial)).astype(dtype)


@register("conv3d")
class Conv3d:
    @staticmethod
    def forward(args, attrs, training):
        x, w = args[0], args[1]
        if x.ndim != 5 or w.ndim != 5:
            raise ValueError("conv3d expects (N,C,D,H,W) input and (Cout,Cin,kd,kh,kw) filters")
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"channel mismatch: input has {x.shape[1]}, filters expect {w.shape[1]}")
        stride = _triple(attrs.get("stride", 1))
        kernel = w.shape[2:]
        cols, out, pads, pshape = _conv_patches(x, kernel, stride)
        N, cout = x.shape[0], w.shape[0]
        mat = cols.reshape(-1, w[0].size)
        y = mat @ w.reshape(cout, -1).T
        y = y.reshape((N,) + out + (cout,)).transpose(0, 4, 1, 2, 3)
        if len(args) > 2:
            y = y + args[2].reshape(1, -1, 1, 1, 1)
        return np.ascontiguousarray(y), (cols, pads, pshape, stride)

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x, w = args[0], args[1]
        cols, pads, pshape, stride = cache
        cout = w.shape[0]
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        grads = [None] * len(args)
        if needs[1]:
            grads[1] = (g2.T @ cols.reshape(g2.shape[0], -1)).reshape(w.shape)
        if len(args) > 2 and needs[2]:
            grads[2] = _sum64(g2, 0)
        if needs[0]:
            dcols = (g2 @ w.reshape(cout, -1)).reshape(cols.shape)
            grads[0] = _scatter_patches(dcols, pshape, stride, pads, x.shape[2:], x.dtype)
        return grads


@register("deconv3d")
class Deconv3d:
    """Transposed convolution; filters are (Cin, Cout, kd, kh, kw)."""

    @staticmethod
    def forward(args, attrs, training):
        x, w = args[0], args[1]
        if x.ndim != 5 or w.ndim != 5:
            raise ValueError("deconv3d expects (N,C,D,H,W) input and (Cin,Cout,kd,kh,kw) filters")
        if x.shape[1] != w.shape[0]:
            raise ValueError(f"channel mismatch: input has {x.shape[1]}, filters expect {w.shape[0]}")
        up = _triple(attrs.get("up", 1))
        if min(up) < 1:
            raise ValueError("up factor must be >= 1")
        kernel = w.shape[2:]
        N, cin, cout = x.shape[0], w.shape[0], w.shape[1]
        spatial = tuple(n * u for n, u in zip(x.shape[2:], up))
        out, pads = conv_geometry(spatial, kernel, up)
        pshape = tuple(n + a + b for n, (a, b) in zip(spatial, pads))
        x2 = x.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
        cols = (x2 @ w.reshape(cin, -1)).reshape((N,) + out + (cout,) + kernel)
        y = _scatter_patches(cols, pshape, up, pads, spatial, x.dtype)
        if len(args) > 2:
            y = y + args[2].reshape(1, -1, 1, 1, 1)
        return y, (x2, pads, up)

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x, w = args[0], args[1]
        x2, pads, up = cache
        cin = w.shape[0]
        kernel = w.shape[2:]
        gp = _pad(g, pads)
        gcols = kernels.im2col3d(gp, kernel, up, x.shape[2:]).reshape(x2.shape[0], -1)
        grads = [None] * len(args)
        if needs[0]:
            dx = gcols @ w.reshape(cin, -1).T
            grads[0] = np.ascontiguousarray(dx.reshape((x.shape[0],) + x.shape[2:] + (cin,)).transpose(0, 4, 1, 2, 3))
        if needs[1]:
            grads[1] = (x2.T @ gcols).reshape(w.shape)
        if len(args) > 2 and needs[2]:
            grads[2] = _sum64(g, (0, 2, 3, 4))
        return grads


@register("maxpool3d")
class MaxPool3d:
    @staticmethod
    def forward(args, attrs, training):
        kernel = _triple(attrs["kernel"])
        if min(kernel) < 1:
            raise ValueError("pool kernel must be >= 1")
        out, idx = kernels.maxpool3d_forward(args[0], kernel)
        return out, idx

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [kernels.maxpool3d_backward(g, cache, args[0].shape[2:])]


@register("batchnorm3d")
class BatchNorm3d:
    """Inputs: x, scale, shift, running_mean, running_var."""

    @staticmethod
    def forward(args, attrs, training):
        x, gamma, beta, rmean, rvar = args
        eps = attrs.get("eps", 1e-5)
        shape = (1, -1, 1, 1, 1)
        axes = (0, 2, 3, 4)
        if training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm3d in training mode needs batch size >= 2")
            mean = x.mean(axis=axes, dtype=np.float64)
            var = ((x - mean.reshape(shape)) ** 2).mean(axis=axes, dtype=np.float64)
            mean, var = mean.astype(x.dtype), var.astype(x.dtype)
        else:
            mean, var = rmean, rvar
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        y = xhat * gamma.reshape(shape) + beta.reshape(shape)
        cache = {"xhat": xhat, "inv": inv}
        if training:
            cache["aux"] = (mean, var)
        return y, cache

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x, gamma = args[0], args[1]
        xhat, inv = cache["xhat"], cache["inv"]
        shape = (1, -1, 1, 1, 1)
        axes = (0, 2, 3, 4)
        grads = [None] * 5
        if needs[1]:
            grads[1] = _sum64(g * xhat, axes)
        if needs[2]:
            grads[2] = _sum64(g, axes)
        if needs[0]:
            gx = g * gamma.reshape(shape)
            if "aux" in cache:
                m = x.size // x.shape[1]
                s1 = _sum64(gx, axes).reshape(shape)
                s2 = _sum64(gx * xhat, axes).reshape(shape)
                grads[0] = inv.reshape(shape) * (gx - s1 / m - xhat * s2 / m)
            else:
                grads[0] = gx * inv.reshape(shape)
        return grads


@register("linear")
class Linear:
    """x (N, F) @ W(O, F).T [+ b]."""

    @staticmethod
    def forward(args, attrs, training):
        x, w = args[0], args[1]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
        y = x @ w.T
        if len(args) > 2:
            y = y + args[2]
        return y, None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x, w = args[0], args[1]
        grads = [None] * len(args)
        if needs[0]:
            grads[0] = g @ w
        if needs[1]:
            grads[1] = g.T @ x
        if len(args) > 2 and needs[2]:
            grads[2] = _sum64(g, 0)
        return grads


@register("relu")
class Relu:
    @staticmethod
    def forward(args, attrs, training):
        return np.maximum(args[0], 0), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g * (args[0] > 0)]


@register("tanh")
class Tanh:
    @staticmethod
    def forward(args, attrs, training):
        return np.tanh(args[0]), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g * (1 - out * out)]


def _same_shape(a, b, kind):
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


@register("add")
class Add:
    @staticmethod
    def forward(args, attrs, training):
        _same_shape(args[0], args[1], "add")
        return args[0] + args[1], None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g, g]


@register("sub")
class Sub:
    @staticmethod
    def forward(args, attrs, training):
        _same_shape(args[0], args[1], "sub")
        return args[0] - args[1], None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g, -g]


@register("mul")
class Mul:
    @staticmethod
    def forward(args, attrs, training):
        _same_shape(args[0], args[1], "mul")
        return args[0] * args[1], None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g * args[1], g * args[0]]


@register("scale")
class Scale:
    @staticmethod
    def forward(args, attrs, training):
        return args[0] * args[0].dtype.type(attrs["c"]), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g * g.dtype.type(attrs["c"])]


@register("sum")
class Sum:
    """Sum of all elements to a scalar (float64 accumulation)."""

    @staticmethod
    def forward(args, attrs, training):
        x = args[0]
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [np.full(args[0].shape, g, dtype=args[0].dtype)]


@register("sum_per_sample")
class SumPerSample:
    @staticmethod
    def forward(args, attrs, training):
        x = args[0]
        return _sum64(x.reshape(x.shape[0], -1), 1), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x = args[0]
        return [np.broadcast_to(g.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape).copy()]


@register("sumsq_per_sample")
class SumSqPerSample:
    @staticmethod
    def forward(args, attrs, training):
        x = args[0]
        flat = x.reshape(x.shape[0], -1)
        return np.einsum("ij,ij->i", flat.astype(np.float64), flat).astype(x.dtype), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        x = args[0]
        return [2 * x * g.reshape((-1,) + (1,) * (x.ndim - 1))]


@register("flatten")
class Flatten:
    @staticmethod
    def forward(args, attrs, training):
        x = args[0]
        return x.reshape(x.shape[0], -1), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g.reshape(args[0].shape)]


@register("reshape")
class Reshape:
    """Reshape keeping the leading batch axis; ``shape`` excludes it."""

    @staticmethod
    def forward(args, attrs, training):
        x = args[0]
        return x.reshape((x.shape[0],) + tuple(attrs["shape"])), None

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        return [g.reshape(args[0].shape)]


@register("concat")
class Concat:
    """Concatenate flattened per-sample features along axis 1."""

    @staticmethod
    def forward(args, attrs, training):
        flat = [a.reshape(a.shape[0], -1) for a in args]
        return np.concatenate(flat, axis=1), [f.shape[1] for f in flat]

    @staticmethod
    def backward(g, args, out, cache, attrs, needs):
        splits = np.cumsum(cache)[:-1]
        return [p.reshape(a.shape) for p, a in zip(np.split(g, splits, axis=1), args)]
