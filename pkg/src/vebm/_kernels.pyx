# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch kernels for conv3d / deconv3d / maxpool3d."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, :, ::1] xp, kernel, stride, out_shape):
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N * Do * Ho * Wo, C * kd * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, z, y, x, c, a, b, e, z0, y0, x0, row
    cdef real *dst
    cdef real *src
    with nogil:
        row = 0
        for n in range(N):
            for z in range(Do):
                z0 = z * sd
                for y in range(Ho):
                    y0 = y * sh
                    for x in range(Wo):
                        x0 = x * sw
                        dst = &cols[row, 0]
                        for c in range(C):
                            for a in range(kd):
                                for b in range(kh):
                                    # one contiguous run of kw voxels along x
                                    src = &xp[n, c, z0 + a, y0 + b, x0]
                                    for e in range(kw):
                                        dst[e] = src[e]
                                    dst += kw
                        row = row + 1
    return out.reshape(N, Do, Ho, Wo, C, kd, kh, kw)


def col2im3d(cols_in, padded_shape, stride):
    N, Do, Ho, Wo, C, kd, kh, kw = cols_in.shape
    return _col2im(cols_in.reshape(N * Do * Ho * Wo, C * kd * kh * kw),
                   N, Do, Ho, Wo, C, kd, kh, kw, padded_shape, stride)


def _col2im(real[:, ::1] cols, Py_ssize_t N, Py_ssize_t Do, Py_ssize_t Ho, Py_ssize_t Wo,
            Py_ssize_t C, Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw, padded_shape, stride):
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    acc_arr = np.zeros((N, C, padded_shape[0], padded_shape[1], padded_shape[2]), dtype=np.float64)
    cdef double[:, :, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t n, z, y, x, c, a, b, e, z0, y0, x0, row
    cdef real *src
    cdef double *dst
    with nogil:
        row = 0
        for n in range(N):
            for z in range(Do):
                z0 = z * sd
                for y in range(Ho):
                    y0 = y * sh
                    for x in range(Wo):
                        x0 = x * sw
                        src = &cols[row, 0]
                        for c in range(C):
                            for a in range(kd):
                                for b in range(kh):
                                    dst = &acc[n, c, z0 + a, y0 + b, x0]
                                    for e in range(kw):
                                        dst[e] += src[e]
                                    src += kw
                        row = row + 1
    return acc_arr


def maxpool3d_forward(real[:, :, :, :, ::1] xin, kernel):
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t N = xin.shape[0], C = xin.shape[1]
    cdef Py_ssize_t D = xin.shape[2], H = xin.shape[3], W = xin.shape[4]
    cdef Py_ssize_t Do = (D + kd - 1) // kd, Ho = (H + kh - 1) // kh, Wo = (W + kw - 1) // kw
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, C, Do, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((N, C, Do, Ho, Wo), dtype=np.int64)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, c, z, y, x, zz, yy, xx, best_i
    cdef real best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for z in range(Do):
                    for y in range(Ho):
                        for x in range(Wo):
                            best_i = -1
                            best = 0
                            # row-major scan: strict '>' keeps the lowest index on ties
                            for zz in range(z * kd, min(z * kd + kd, D)):
                                for yy in range(y * kh, min(y * kh + kh, H)):
                                    for xx in range(x * kw, min(x * kw + kw, W)):
                                        v = xin[n, c, zz, yy, xx]
                                        if best_i < 0 or v > best:
                                            best = v
                                            best_i = (zz * H + yy) * W + xx
                            out[n, c, z, y, x] = best
                            idx[n, c, z, y, x] = best_i
    return out_arr, idx_arr


def maxpool3d_backward(real[:, :, :, :, ::1] grad_out, cnp.int64_t[:, :, :, :, ::1] argidx, in_shape):
    cdef Py_ssize_t N = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t Do = grad_out.shape[2], Ho = grad_out.shape[3], Wo = grad_out.shape[4]
    cdef Py_ssize_t D = in_shape[0], H = in_shape[1], W = in_shape[2]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((N, C, D * H * W), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, z, y, x
    with nogil:
        for n in range(N):
            for c in range(C):
                for z in range(Do):
                    for y in range(Ho):
                        for x in range(Wo):
                            dx[n, c, argidx[n, c, z, y, x]] += grad_out[n, c, z, y, x]
    return dx_arr.reshape(N, C, D, H, W)
