# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels. Signature-compatible with _kernels_py; see that module
for the contract of each function."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor, pow, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, double eps):
    shape = x.shape
    cdef Py_ssize_t d = shape[len(shape) - 1]
    x2_arr = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, d)
    cdef double[:, ::1] x2 = x2_arr
    cdef Py_ssize_t n = x2.shape[0]
    y_arr = np.empty((n, d), dtype=np.float64)
    mean_arr = np.empty(n, dtype=np.float64)
    istd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] istd = istd_arr
    cdef double[::1] g = np.ascontiguousarray(gain, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double mu, var, dev, s
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x2[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dev = x2[i, j] - mu
            var += dev * dev
        var /= d
        s = 1.0 / sqrt(var + eps)
        mean[i] = mu
        istd[i] = s
        for j in range(d):
            y[i, j] = (x2[i, j] - mu) * s * g[j] + b[j]
    red = shape[:-1] + (1,)
    return y_arr.reshape(shape), mean_arr.reshape(red), istd_arr.reshape(red)


def layer_norm_bwd(gy, x, gain, mean, inv_std):
    shape = x.shape
    cdef Py_ssize_t d = shape[len(shape) - 1]
    cdef double[:, ::1] gy2 = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1, d)
    cdef double[:, ::1] x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, d)
    cdef double[::1] mu = np.ascontiguousarray(mean, dtype=np.float64).reshape(-1)
    cdef double[::1] istd = np.ascontiguousarray(inv_std, dtype=np.float64).reshape(-1)
    cdef double[::1] g = np.ascontiguousarray(gain, dtype=np.float64)
    cdef Py_ssize_t n = x2.shape[0]
    gx_arr = np.empty((n, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    gbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef Py_ssize_t i, j
    cdef double s, xh, gxh, s1, s2
    for i in range(n):
        s = istd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x2[i, j] - mu[i]) * s
            gxh = gy2[i, j] * g[j]
            s1 += gxh
            s2 += gxh * xh
            ggain[j] += gy2[i, j] * xh
            gbias[j] += gy2[i, j]
        for j in range(d):
            xh = (x2[i, j] - mu[i]) * s
            gxh = gy2[i, j] * g[j]
            gx[i, j] = s * (gxh - (s1 + xh * s2) / d)
    return gx_arr.reshape(shape), ggain_arr, gbias_arr


def gelu_fwd(x):
    shape = x.shape
    x1_arr = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef double[::1] x1 = x1_arr
    cdef Py_ssize_t n = x1.shape[0]
    y_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef Py_ssize_t i
    cdef double v, u
    for i in range(n):
        v = x1[i]
        u = GELU_C * (v + GELU_A * v * v * v)
        y[i] = 0.5 * v * (1.0 + tanh(u))
    return y_arr.reshape(shape)


def gelu_bwd(gy, x):
    shape = x.shape
    cdef double[::1] gy1 = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1)
    cdef double[::1] x1 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = x1.shape[0]
    gx_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    cdef Py_ssize_t i
    cdef double v, u, t, du
    for i in range(n):
        v = x1[i]
        u = GELU_C * (v + GELU_A * v * v * v)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        gx[i] = gy1[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return gx_arr.reshape(shape)


def softmax_fwd(x):
    shape = x.shape
    cdef Py_ssize_t d = shape[len(shape) - 1]
    cdef double[:, ::1] x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, d)
    cdef Py_ssize_t n = x2.shape[0]
    p_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef Py_ssize_t i, j
    cdef double hi, tot
    for i in range(n):
        hi = x2[i, 0]
        for j in range(1, d):
            if x2[i, j] > hi:
                hi = x2[i, j]
        tot = 0.0
        for j in range(d):
            p[i, j] = exp(x2[i, j] - hi)
            tot += p[i, j]
        for j in range(d):
            p[i, j] /= tot
    return p_arr.reshape(shape)


def softmax_bwd(gy, p):
    shape = p.shape
    cdef Py_ssize_t d = shape[len(shape) - 1]
    cdef double[:, ::1] gy2 = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1, d)
    cdef double[:, ::1] p2 = np.ascontiguousarray(p, dtype=np.float64).reshape(-1, d)
    cdef Py_ssize_t n = p2.shape[0]
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += gy2[i, j] * p2[i, j]
        for j in range(d):
            gx[i, j] = p2[i, j] * (gy2[i, j] - dot)
    return gx_arr.reshape(shape)


def adam_update(param, grad, m, v, t, double lr, double beta1, double beta2,
                double eps, double weight_decay):
    cdef double[::1] p1 = param.reshape(-1)
    cdef double[::1] g1 = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] m1 = m.reshape(-1)
    cdef double[::1] v1 = v.reshape(-1)
    cdef Py_ssize_t n = p1.shape[0]
    cdef double c1 = 1.0 - pow(beta1, <double> t)
    cdef double c2 = 1.0 - pow(beta2, <double> t)
    cdef Py_ssize_t i
    cdef double mhat, vhat
    for i in range(n):
        m1[i] = beta1 * m1[i] + (1.0 - beta1) * g1[i]
        v1[i] = beta2 * v1[i] + (1.0 - beta2) * g1[i] * g1[i]
        mhat = m1[i] / c1
        vhat = v1[i] / c2
        p1[i] = p1[i] - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p1[i])


def trilinear_resample(vol, Py_ssize_t out_z, Py_ssize_t out_y, Py_ssize_t out_x,
                       double scale_z, double scale_y, double scale_x):
    cdef double[:, :, ::1] src = np.ascontiguousarray(vol, dtype=np.float64)
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    out_arr = np.empty((out_z, out_y, out_x), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr

    z0_arr = np.empty(out_z, dtype=np.intp)
    z1_arr = np.empty(out_z, dtype=np.intp)
    fz_arr = np.empty(out_z, dtype=np.float64)
    y0_arr = np.empty(out_y, dtype=np.intp)
    y1_arr = np.empty(out_y, dtype=np.intp)
    fy_arr = np.empty(out_y, dtype=np.float64)
    x0_arr = np.empty(out_x, dtype=np.intp)
    x1_arr = np.empty(out_x, dtype=np.intp)
    fx_arr = np.empty(out_x, dtype=np.float64)
    cdef Py_ssize_t[::1] z0 = z0_arr, z1 = z1_arr
    cdef Py_ssize_t[::1] y0 = y0_arr, y1 = y1_arr
    cdef Py_ssize_t[::1] x0 = x0_arr, x1 = x1_arr
    cdef double[::1] fz = fz_arr, fy = fy_arr, fx = fx_arr

    cdef Py_ssize_t i
    cdef double c
    for i in range(out_z):
        c = (i + 0.5) * scale_z - 0.5
        if c < 0.0:
            c = 0.0
        if c > nz - 1.0:
            c = nz - 1.0
        z0[i] = <Py_ssize_t> floor(c)
        if z0[i] > nz - 1:
            z0[i] = nz - 1
        z1[i] = z0[i] + 1 if z0[i] + 1 < nz else nz - 1
        fz[i] = c - z0[i]
    for i in range(out_y):
        c = (i + 0.5) * scale_y - 0.5
        if c < 0.0:
            c = 0.0
        if c > ny - 1.0:
            c = ny - 1.0
        y0[i] = <Py_ssize_t> floor(c)
        if y0[i] > ny - 1:
            y0[i] = ny - 1
        y1[i] = y0[i] + 1 if y0[i] + 1 < ny else ny - 1
        fy[i] = c - y0[i]
    for i in range(out_x):
        c = (i + 0.5) * scale_x - 0.5
        if c < 0.0:
            c = 0.0
        if c > nx - 1.0:
            c = nx - 1.0
        x0[i] = <Py_ssize_t> floor(c)
        if x0[i] > nx - 1:
            x0[i] = nx - 1
        x1[i] = x0[i] + 1 if x0[i] + 1 < nx else nx - 1
        fx[i] = c - x0[i]

    cdef Py_ssize_t iz, iy, ix
    cdef double wz, wy, wx, c00, c01, c10, c11, c0, c1
    for iz in range(out_z):
        wz = fz[iz]
        for iy in range(out_y):
            wy = fy[iy]
            for ix in range(out_x):
                wx = fx[ix]
                c00 = src[z0[iz], y0[iy], x0[ix]] * (1.0 - wx) + src[z0[iz], y0[iy], x1[ix]] * wx
                c01 = src[z0[iz], y1[iy], x0[ix]] * (1.0 - wx) + src[z0[iz], y1[iy], x1[ix]] * wx
                c10 = src[z1[iz], y0[iy], x0[ix]] * (1.0 - wx) + src[z1[iz], y0[iy], x1[ix]] * wx
                c11 = src[z1[iz], y1[iy], x0[ix]] * (1.0 - wx) + src[z1[iz], y1[iy], x1[ix]] * wx
                c0 = c00 * (1.0 - wy) + c01 * wy
                c1 = c10 * (1.0 - wy) + c11 * wy
                out[iz, iy, ix] = c0 * (1.0 - wz) + c1 * wz
    return out_arr
