"""Patch kernels behind conv3d, deconv3d and maxpool3d.

The compiled extension (``vebm._kernels``) is used when it was built;
otherwise the numpy implementations in ``vebm._fallback`` take over. Set
``VEBM_KERNELS=python`` to force the fallback.

Contract (both backends):

``im2col3d(xp, kernel, stride, out_shape)``
    ``xp`` is a C-contiguous padded volume (N, C, Dp, Hp, Wp); returns
    patches shaped (N, Do, Ho, Wo, C, kd, kh, kw) in ``xp``'s dtype.
``col2im3d(cols, padded_shape, stride)``
    adjoint of ``im2col3d``; returns a float64 (N, C, Dp, Hp, Wp) volume.
``maxpool3d_forward(x, kernel)`` / ``maxpool3d_backward(g, argidx, in_shape)``
    non-overlapping pooling with ceil-partitioned borders; ``argidx`` holds
    flat (D*H*W) indices of the winners, lowest index on ties.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("VEBM_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def _c(x):
    return np.ascontiguousarray(x)


def im2col3d(xp, kernel, stride, out_shape):
    return _impl.im2col3d(_c(xp), tuple(kernel), tuple(stride), tuple(out_shape))


def col2im3d(cols, padded_shape, stride):
    return _impl.col2im3d(_c(cols), tuple(padded_shape), tuple(stride))


def maxpool3d_forward(x, kernel):
    return _impl.maxpool3d_forward(_c(x), tuple(kernel))


def maxpool3d_backward(grad_out, argidx, in_shape):
    return _impl.maxpool3d_backward(_c(grad_out), _c(argidx), tuple(in_shape))


def using(backend):
    """Return a namespace exposing the requested backend's kernels directly."""
    if backend == "python":
        return _fallback
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")
