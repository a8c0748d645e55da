"""Numeric kernels for (frames x channels) sequence matrices.

Every differentiable op here comes as a forward/backward pair. Arrays are
row = frame, column = channel, float64 throughout the compute path.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from colontcn import _backend


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


def make_rng(seed, *stream):
    """Counter-based generator (Philox) keyed by ``seed`` and an optional stream path.

    Equal ``(seed, *stream)`` gives the same draws on every platform.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


@dataclass
class ConvParams:
    """Parameters of a 1-D convolution.

    ``v`` has shape (out_ch, in_ch, k). When ``g`` is given the effective kernel
    is ``g * v / ||v||`` per output channel (weight normalization).
    """

    v: np.ndarray
    b: np.ndarray
    g: Optional[np.ndarray] = None
    dilation: int = 1

    @property
    def kernel_size(self):
        return self.v.shape[2]

    @property
    def in_channels(self):
        return self.v.shape[1]

    @property
    def out_channels(self):
        return self.v.shape[0]


@dataclass
class ConvGrads:
    """Gradient buffers congruent with a :class:`ConvParams`."""

    v: np.ndarray
    b: np.ndarray
    g: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, p):
        return cls(np.zeros_like(p.v), np.zeros_like(p.b), None if p.g is None else np.zeros_like(p.g))

    def zero(self):
        self.v[...] = 0.0
        self.b[...] = 0.0
        if self.g is not None:
            self.g[...] = 0.0


def _validate_conv(x, p):
    if x.ndim != 2:
        raise ValueError(f"expected a (T, C) matrix, got shape {x.shape}")
    out_ch, in_ch, k = p.v.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if p.dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {p.dilation}")
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, conv expects {in_ch}")
    if p.b.shape != (out_ch,) or (p.g is not None and p.g.shape != (out_ch,)):
        raise ValueError("bias/gain shape does not match output channels")


def effective_kernel(p, weight_norm=None):
    """Return ``(w, norms)``; ``norms`` is None without weight normalization."""
    if weight_norm is None:
        weight_norm = p.g is not None
    if not weight_norm:
        return p.v, None
    if p.g is None:
        raise ValueError("weight_norm requested but conv has no gains")
    norms = np.sqrt(np.einsum("oik,oik->o", p.v, p.v))
    if np.any(norms == 0):
        raise NumericError("zero-norm direction vector under weight normalization")
    return p.v * (p.g / norms)[:, None, None], norms


def conv1d_forward(x, p, weight_norm=None):
    """Dilated acausal 1-D convolution with symmetric zero padding.

    ``out[t, co] = b[co] + sum_{ci, j} w[co, ci, j] * x[t + (j - (k-1)/2) * dilation, ci]``,
    frames outside ``[0, T)`` read as zero, so the output keeps T frames.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    _validate_conv(x, p)
    _check_finite(x, "conv1d input")
    w, _ = effective_kernel(p, weight_norm)
    out = np.empty((x.shape[0], p.out_channels))
    out[...] = p.b
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))  # (k, in, out)
    _backend.kernels.correlate(x, wt, p.dilation, 1, out)
    return out


def conv1d_backward(x, p, grad_out, weight_norm=None, grads=None):
    """Gradients of :func:`conv1d_forward` w.r.t. input, directions, gains, bias.

    Returns ``(grad_x, grad_v, grad_g, grad_b)`` (``grad_g`` is None without
    weight normalization). When ``grads`` is given they are also accumulated
    into it.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    _validate_conv(x, p)
    if grad_out.shape != (x.shape[0], p.out_channels):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(x.shape[0], p.out_channels)}")
    w, norms = effective_kernel(p, weight_norm)
    kern = _backend.kernels

    grad_x = np.zeros_like(x)
    kern.correlate(grad_out, np.ascontiguousarray(w.transpose(2, 0, 1)), p.dilation, -1, grad_x)

    gw_taps = np.zeros((p.kernel_size, p.in_channels, p.out_channels))
    kern.weight_grad(x, grad_out, p.dilation, gw_taps)
    grad_w = gw_taps.transpose(2, 1, 0)
    grad_b = grad_out.sum(axis=0)

    if norms is None:
        grad_v, grad_g = np.ascontiguousarray(grad_w), None
    else:
        # w = g v / n  =>  dL/dg = <G, v>/n,  dL/dv = (g/n) (G - dL/dg * v / n)
        grad_g = np.einsum("oik,oik->o", grad_w, p.v) / norms
        scale = (p.g / norms)[:, None, None]
        grad_v = scale * (grad_w - (grad_g / norms)[:, None, None] * p.v)

    if grads is not None:
        grads.v += grad_v
        grads.b += grad_b
        if grad_g is not None:
            grads.g += grad_g
    return grad_x, grad_v, grad_g, grad_b


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def dropout(x, rate, rng, training=True):
    """Inverted dropout. Returns ``(out, keep_mask)``; inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    return x * keep * (1.0 / (1.0 - rate)), keep


def dropout_backward(grad_out, keep, rate):
    if rate == 0.0:
        return grad_out
    return grad_out * keep * (1.0 / (1.0 - rate))


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(probs, grad_probs):
    """Gradient w.r.t. logits given the gradient w.r.t. softmax probabilities."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def log_softmax_backward(probs, grad_log_probs):
    """Gradient w.r.t. logits given the gradient w.r.t. log-softmax outputs."""
    return grad_log_probs - probs * grad_log_probs.sum(axis=1, keepdims=True)


def grad_check(f: Callable, point, eps=1e-5):
    """Max relative error between an analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != point shape {x.shape}")
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite value or gradient at the check point")
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
