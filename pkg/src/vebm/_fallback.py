"""Pure-numpy versions of the patch kernels in ``_kernels.pyx``.

Both backends share one contract; see ``vebm.kernels`` for the signatures.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, kernel, stride, out_shape):
    """Gather (N, Do, Ho, Wo, C, kd, kh, kw) patches from a padded volume."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    Do, Ho, Wo = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : sd * (Do - 1) + 1 : sd, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))


def col2im3d(cols, padded_shape, stride):
    """Scatter-add patches back into a padded volume (float64 accumulator)."""
    N, Do, Ho, Wo, C, kd, kh, kw = cols.shape
    Dp, Hp, Wp = padded_shape
    sd, sh, sw = stride
    acc = np.zeros((N, C, Dp, Hp, Wp), dtype=np.float64)
    if kd * kh * kw <= Do * Ho * Wo:
        moved = cols.transpose(0, 4, 5, 6, 7, 1, 2, 3)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    acc[:, :, a : a + sd * (Do - 1) + 1 : sd,
                        b : b + sh * (Ho - 1) + 1 : sh,
                        c : c + sw * (Wo - 1) + 1 : sw] += moved[:, :, a, b, c]
    else:
        for z in range(Do):
            for y in range(Ho):
                for x in range(Wo):
                    acc[:, :, z * sd : z * sd + kd, y * sh : y * sh + kh,
                        x * sw : x * sw + kw] += cols[:, z, y, x]
    return acc


def _block_view(x, kernel, fill):
    N, C, D, H, W = x.shape
    kd, kh, kw = kernel
    Do, Ho, Wo = -(-D // kd), -(-H // kh), -(-W // kw)
    padded = np.full((N, C, Do * kd, Ho * kh, Wo * kw), fill, dtype=x.dtype)
    padded[:, :, :D, :H, :W] = x
    blocks = padded.reshape(N, C, Do, kd, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blocks.reshape(N, C, Do, Ho, Wo, kd * kh * kw)


def maxpool3d_forward(x, kernel):
    """Non-overlapping max pooling with ceil-partitioned borders.

    Returns the pooled volume and, per output cell, the flat index (into
    D*H*W) of the winning input voxel. Ties go to the lowest index.
    """
    N, C, D, H, W = x.shape
    kd, kh, kw = kernel
    blocks = _block_view(x, kernel, -np.inf)
    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    Do, Ho, Wo = out.shape[2:]
    dz, rem = np.divmod(local, kh * kw)
    dy, dx = np.divmod(rem, kw)
    z = np.arange(Do).reshape(-1, 1, 1) * kd + dz
    y = np.arange(Ho).reshape(1, -1, 1) * kh + dy
    xx = np.arange(Wo).reshape(1, 1, -1) * kw + dx
    flat = (z * H + y) * W + xx
    return np.ascontiguousarray(out), flat.astype(np.int64)


def maxpool3d_backward(grad_out, argidx, in_shape):
    N, C = grad_out.shape[:2]
    D, H, W = in_shape
    dx = np.zeros((N, C, D * H * W), dtype=np.float64)
    g = grad_out.reshape(N, C, -1)
    idx = argidx.reshape(N, C, -1)
    # non-overlapping blocks: each input voxel wins at most one cell
    np.put_along_axis(dx, idx, g, axis=-1)
    return dx.reshape(N, C, D, H, W).astype(grad_out.dtype)
