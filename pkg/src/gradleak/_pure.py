"""Pure-NumPy implementations of the hot kernels.

These are the reference implementations; gradleak._core provides the
same three functions compiled with Cython.  Both backends fill the same
entries in the same order, so the circulant builders are bit-identical
and the TV iteration agrees to rounding.
"""

import numpy as np


def weight_circulant_fill(kernel, stride, in_height, in_width, out):
    """Scatter kernel taps into the matricized convolution operator.

    Row p = (o, y, x) of ``out`` holds the dot pattern producing output
    pixel (o, y, x); the (c, y*stride+dy, x*stride+dx) column gets
    kernel[o, c, dy, dx].  ``out`` must be a zeroed (m, n) array.
    """
    oc, ic, k, _ = kernel.shape
    oh = (in_height - k) // stride + 1
    ow = (in_width - k) // stride + 1
    O, Y, X, C, DY, DX = np.ix_(
        np.arange(oc), np.arange(oh), np.arange(ow),
        np.arange(ic), np.arange(k), np.arange(k),
    )
    rows = (O * oh + Y) * ow + X
    cols = (C * in_height + (Y * stride + DY)) * in_width + (X * stride + DX)
    vals = kernel[O, C, DY, DX]
    rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
    out[rows.ravel(), cols.ravel()] = vals.ravel()


def gradient_circulant_fill(grad_z, kernel_size, stride, in_channels,
                            in_height, in_width, out):
    """Scatter output-gradient values into the weight-gradient operator.

    Row kappa = (o, c, dy, dx) corresponds to one kernel tap; applying
    the filled matrix to the flattened layer input reproduces the
    flattened weight gradient.  ``out`` must be a zeroed (|W|, n) array.
    """
    oc, oh, ow = grad_z.shape
    k = kernel_size
    O, C, DY, DX, Y, X = np.ix_(
        np.arange(oc), np.arange(in_channels), np.arange(k),
        np.arange(k), np.arange(oh), np.arange(ow),
    )
    rows = ((O * in_channels + C) * k + DY) * k + DX
    cols = (C * in_height + (Y * stride + DY)) * in_width + (X * stride + DX)
    vals = grad_z[:, None, None, None, :, :]
    rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
    out[rows.ravel(), cols.ravel()] = vals.ravel()


def tv_chambolle(image, weight, eps, max_iters):
    """Total-variation denoising of one 2-d channel (Chambolle's dual
    projection scheme for the ROF model, step 1/4).

    Stops when the per-pixel energy change falls below eps times the
    initial energy, or after max_iters dual updates.
    """
    rows, cols = image.shape
    px = np.zeros((rows, cols))
    py = np.zeros((rows, cols))
    gx = np.zeros((rows, cols))
    gy = np.zeros((rows, cols))
    d = np.zeros((rows, cols))
    out = image.copy()
    tau = 0.25
    e_init = e_prev = 0.0
    for it in range(max_iters):
        if it > 0:
            # out = image + div(p)
            d = -(px + py)
            d[1:, :] += px[:-1, :]
            d[:, 1:] += py[:, :-1]
            out = image + d
        e = float((d * d).sum())
        gx[:-1, :] = np.diff(out, axis=0)
        gy[:, :-1] = np.diff(out, axis=1)
        norm = np.sqrt(gx * gx + gy * gy)
        e += weight * float(norm.sum())
        norm *= tau / weight
        norm += 1.0
        px = (px - tau * gx) / norm
        py = (py - tau * gy) / norm
        e /= rows * cols
        if it == 0:
            e_init = e_prev = e
        elif abs(e_prev - e) < eps * e_init:
            break
        else:
            e_prev = e
    return out
