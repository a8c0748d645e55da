"""Pure-numpy dilated-correlation kernels; same contract as ``_ckernels``."""

import numpy as np


def _tap_range(T, shift):
    # output frames t whose source frame t + shift lies in [0, T)
    return max(0, -shift), min(T, T - shift)


def correlate(x, w, dilation, sign, out):
    """out[t] += sum_j x[t + sign*(j-h)*dilation] @ w[j], zero outside [0, T)."""
    T = x.shape[0]
    k = w.shape[0]
    if w.shape[1] != x.shape[1] or out.shape != (T, w.shape[2]):
        raise ValueError("correlate: shape mismatch")
    h = (k - 1) // 2
    for j in range(k):
        shift = sign * (j - h) * dilation
        lo, hi = _tap_range(T, shift)
        if lo >= hi:
            continue
        out[lo:hi] += x[lo + shift:hi + shift] @ w[j]


def weight_grad(x, g, dilation, gw):
    """gw[j, ci, co] += sum_t x[t + (j-h)*dilation, ci] * g[t, co]."""
    T = x.shape[0]
    k = gw.shape[0]
    if g.shape[0] != T or gw.shape[1:] != (x.shape[1], g.shape[1]):
        raise ValueError("weight_grad: shape mismatch")
    h = (k - 1) // 2
    for j in range(k):
        shift = (j - h) * dilation
        lo, hi = _tap_range(T, shift)
        if lo >= hi:
            continue
        gw[j] += x[lo + shift:hi + shift].T @ g[lo:hi]
