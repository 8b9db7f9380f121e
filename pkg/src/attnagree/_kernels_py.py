"""Numpy reference kernels.

Same signatures as the compiled extension in _kernels.pyx; attnagree.backend
picks one implementation at import time. All arrays are float64 and
C-contiguous; shapes are (..., d) with the reduction over the last axis
unless noted.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (y, mean, inv_std); mean/inv_std keep the reduced axis."""
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv_std * gain + bias
    return y, mean, inv_std


def layer_norm_bwd(gy, x, gain, mean, inv_std):
    """Returns (gx, ggain, gbias). ggain/gbias are summed over all rows."""
    d = x.shape[-1]
    xhat = (x - mean) * inv_std
    gxhat = gy * gain
    red = x.ndim - 1
    ggain = (gy * xhat).sum(axis=tuple(range(red)))
    gbias = gy.sum(axis=tuple(range(red)))
    s1 = gxhat.sum(axis=-1, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
    gx = inv_std * (gxhat - (s1 + xhat * s2) / d)
    return gx, ggain, gbias


def gelu_fwd(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(gy, x):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(gy, p):
    dot = (gy * p).sum(axis=-1, keepdims=True)
    return p * (gy - dot)


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One step, in-place on param/m/v. Weight decay is decoupled from the
    adaptive term and both read the incoming param value."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


def trilinear_resample(vol, out_z, out_y, out_x, scale_z, scale_y, scale_x):
    """Resample vol (z, y, x) onto an (out_z, out_y, out_x) grid.

    Output voxel centre i maps to input coordinate (i + 0.5) * scale - 0.5,
    clamped to the border; corners are blended trilinearly.
    """
    nz, ny, nx = vol.shape

    def axis_coords(n_out, scale, n_in):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.intp)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    z0, z1, fz = axis_coords(out_z, scale_z, nz)
    y0, y1, fy = axis_coords(out_y, scale_y, ny)
    x0, x1, fx = axis_coords(out_x, scale_x, nx)

    fz = fz[:, None, None]
    fy = fy[None, :, None]
    fx = fx[None, None, :]

    c000 = vol[np.ix_(z0, y0, x0)]
    c001 = vol[np.ix_(z0, y0, x1)]
    c010 = vol[np.ix_(z0, y1, x0)]
    c011 = vol[np.ix_(z0, y1, x1)]
    c100 = vol[np.ix_(z1, y0, x0)]
    c101 = vol[np.ix_(z1, y0, x1)]
    c110 = vol[np.ix_(z1, y1, x0)]
    c111 = vol[np.ix_(z1, y1, x1)]

    c00 = c000 * (1.0 - fx) + c001 * fx
    c01 = c010 * (1.0 - fx) + c011 * fx
    c10 = c100 * (1.0 - fx) + c101 * fx
    c11 = c110 * (1.0 - fx) + c111 * fx
    c0 = c00 * (1.0 - fy) + c01 * fy
    c1 = c10 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz
