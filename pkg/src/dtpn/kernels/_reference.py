"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available (and the ground for cross-checking it).  Arrays are (time x
channel), float32 or float64; the dtype of the inputs is preserved.

Padding is explicit (pad_left, pad_right zeros along time); callers decide
the padding policy.  Convolution is cross-correlation along time.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_length(t_padded: int, kernel: int, stride: int) -> int:
    n = (t_padded - kernel) // stride + 1
    if n < 1:
        raise ValueError(
            f"kernel {kernel} longer than padded input of {t_padded} steps"
        )
    return n


def _padded(x: np.ndarray, pad_left: int, pad_right: int) -> np.ndarray:
    if pad_left == 0 and pad_right == 0:
        return x
    return np.pad(x, ((pad_left, pad_right), (0, 0)))


def _patches(xp: np.ndarray, kernel: int, stride: int, t_out: int) -> np.ndarray:
    s0, s1 = xp.strides
    return as_strided(
        xp, shape=(t_out, kernel, xp.shape[1]), strides=(stride * s0, s0, s1)
    )


def conv1d_forward(x, w, b, stride, pad_left, pad_right):
    """x (T, Cin), w (k, Cin, Cout), b (Cout,) -> y (T_out, Cout)."""
    kernel, cin, cout = w.shape
    xp = _padded(x, pad_left, pad_right)
    t_out = _out_length(xp.shape[0], kernel, stride)
    cols = _patches(xp, kernel, stride, t_out).reshape(t_out, kernel * cin)
    return cols @ w.reshape(kernel * cin, cout) + b


def conv1d_backward(x, w, stride, pad_left, pad_right, gy):
    """Gradients (gx, gw, gb) of sum(gy * conv1d_forward(x, w, b, ...))."""
    kernel, cin, cout = w.shape
    xp = _padded(x, pad_left, pad_right)
    t_out = gy.shape[0]
    cols = _patches(xp, kernel, stride, t_out)

    gb = gy.sum(axis=0)
    gw = np.einsum("tkc,to->kco", cols, gy)
    gcols = (gy @ w.reshape(kernel * cin, cout).T).reshape(t_out, kernel, cin)

    gxp = np.zeros_like(xp)
    for u in range(kernel):
        gxp[u : u + stride * t_out : stride] += gcols[:, u, :]
    gx = gxp[pad_left : gxp.shape[0] - pad_right]
    if pad_left == 0 and pad_right == 0:
        gx = gx.copy()
    return gx, gw, gb


def maxpool1d_forward(x, window, stride):
    """Max over windows starting at 0, stride, ... < T; a final short
    window is truncated at T.  Returns (y, argmax) where argmax holds the
    absolute time index of each winner (earliest index on ties).
    """
    t_in, channels = x.shape
    t_out = (t_in + stride - 1) // stride
    y = np.empty((t_out, channels), dtype=x.dtype)
    argmax = np.empty((t_out, channels), dtype=np.int64)
    cols = np.arange(channels)
    for t in range(t_out):
        lo = t * stride
        hi = min(lo + window, t_in)
        win = x[lo:hi]
        idx = np.argmax(win, axis=0)
        argmax[t] = lo + idx
        y[t] = win[idx, cols]
    return y, argmax


def maxpool1d_backward(argmax, t_in, gy):
    """Route gy entries to their winning input positions."""
    t_out, channels = gy.shape
    gx = np.zeros((t_in, channels), dtype=gy.dtype)
    cols = np.tile(np.arange(channels), t_out)
    np.add.at(gx, (argmax.ravel(), cols), gy.ravel())
    return gx
