"""Training objective: class-weighted CE, truncated MSE smoothing, stage averaging.

Every loss takes per-frame log-probabilities and, with ``return_grad=True``,
also returns the gradient with respect to those log-probabilities. Frames
with ``mask == False`` never contribute (their values are not even read
where avoidable).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class LossConfig:
    tau: float = 4.0
    lam: float = 0.15
    use_tmse: bool = True
    focal_gamma: Optional[float] = None
    # treat frame t-1 as a constant in the smoothing gradient (False: exact gradient)
    tmse_detach: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.focal_gamma is not None and self.focal_gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.focal_gamma}")


def median_frequency_weights(class_frame_counts):
    """``w_c = median(freq) / freq_c`` over present classes; absent classes get 0."""
    counts = np.asarray(class_frame_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be nonnegative")
    present = counts > 0
    if not present.any():
        raise ValueError("all class counts are zero")
    freqs = counts[present] / counts[present].sum()
    weights = np.zeros_like(counts)
    weights[present] = np.median(freqs) / freqs
    return weights


def _frame_mask(n, mask):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask shape {mask.shape} != ({n},)")
    return mask


def _target_log_probs(log_probs, labels, weights, mask):
    T, C = log_probs.shape
    labels = np.asarray(labels)
    if labels.shape != (T,):
        raise ValueError(f"labels shape {labels.shape} != ({T},)")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no unmasked frames")
    y = labels[idx].astype(np.int64)
    if np.any((y < 0) | (y >= C)):
        bad = idx[(y < 0) | (y >= C)][0]
        raise ValueError(f"label {labels[bad]} at frame {bad} outside [0, {C})")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (C,):
        raise ValueError(f"weights shape {weights.shape} != ({C},)")
    return idx, y, log_probs[idx, y], weights[y]


def weighted_cross_entropy(log_probs, labels, weights, mask=None, return_grad=False):
    """Mean over unmasked frames of ``-w[y_t] * log p[t, y_t]``."""
    mask = _frame_mask(log_probs.shape[0], mask)
    idx, y, lp, w = _target_log_probs(log_probs, labels, weights, mask)
    n = idx.size
    value = float(np.sum(-w * lp) / n)
    if not return_grad:
        return value
    grad = np.zeros_like(log_probs)
    grad[idx, y] = -w / n
    return value, grad


def focal_weighted_ce(log_probs, labels, weights, gamma, mask=None, return_grad=False):
    """Mean over unmasked frames of ``-w[y_t] (1 - p_t)^gamma log p_t``."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    mask = _frame_mask(log_probs.shape[0], mask)
    idx, y, lp, w = _target_log_probs(log_probs, labels, weights, mask)
    n = idx.size
    p = np.exp(lp)
    one_minus = np.clip(1.0 - p, 0.0, None)
    mod = one_minus ** gamma
    value = float(np.sum(-w * mod * lp) / n)
    if not return_grad:
        return value
    # d/dlp of -(1-p)^g lp with p = exp(lp): -(1-p)^g + g (1-p)^(g-1) p lp
    dmod = np.zeros_like(p)
    live = one_minus > 0
    dmod[live] = gamma * one_minus[live] ** (gamma - 1.0) * p[live] * lp[live]
    grad = np.zeros_like(log_probs)
    grad[idx, y] = w * (-mod + dmod) / n
    return value, grad


def truncated_mse(log_probs, tau=4.0, mask=None, return_grad=False, detach=True, previous=None):
    """Truncated squared difference of consecutive frames' log-probabilities.

    ``sum_{t,c} min(|d|, tau)^2 / (T C)`` with ``d = log p_t - log p_{t-1}``,
    ``T`` the number of unmasked frames. Pairs touching a masked frame are
    skipped. With ``detach`` the previous frame is a constant in the gradient;
    ``previous`` substitutes a fixed matrix for the ``t-1`` side altogether.
    """
    T, C = log_probs.shape
    mask = _frame_mask(T, mask)
    n = int(mask.sum())
    grad = np.zeros_like(log_probs) if return_grad else None
    pairs = np.flatnonzero(mask[1:] & mask[:-1]) + 1
    if n == 0 or pairs.size == 0:
        return (0.0, grad) if return_grad else 0.0
    prev = log_probs if previous is None else previous
    d = log_probs[pairs] - prev[pairs - 1]
    inside = np.abs(d) <= tau
    clipped = np.where(inside, d, tau)
    value = float(np.sum(clipped * clipped) / (n * C))
    if not return_grad:
        return value
    gd = np.where(inside, 2.0 * d / (n * C), 0.0)
    grad[pairs] = gd
    if not detach and previous is None:
        grad[pairs - 1] -= gd  # pairs are distinct, so are their predecessors
    return value, grad


def classification_loss(log_probs, labels, weights, cfg, mask=None, return_grad=False):
    if cfg.focal_gamma is None:
        return weighted_cross_entropy(log_probs, labels, weights, mask, return_grad)
    return focal_weighted_ce(log_probs, labels, weights, cfg.focal_gamma, mask, return_grad)


def combined_loss(stage_outputs, labels, weights, cfg=None, mask=None, return_grad=False):
    """Mean over stages of ``L_cls + lam * L_tmse``.

    ``stage_outputs`` is a :class:`~colontcn.model.ProbOutput` or a list of
    per-stage log-probability matrices. With ``return_grad`` the second value
    is a list of per-stage gradients w.r.t. the log-probabilities.
    """
    cfg = cfg or LossConfig()
    log_stages = getattr(stage_outputs, "log_probs", stage_outputs)
    if len(log_stages) == 0:
        raise ValueError("need at least one stage output")
    S = len(log_stages)
    total, grads = 0.0, []
    for lp in log_stages:
        if return_grad:
            v, g = classification_loss(lp, labels, weights, cfg, mask, True)
        else:
            v = classification_loss(lp, labels, weights, cfg, mask)
        if cfg.use_tmse and cfg.lam > 0:
            if return_grad:
                tv, tg = truncated_mse(lp, cfg.tau, mask, True, cfg.tmse_detach)
                g = g + cfg.lam * tg
            else:
                tv = truncated_mse(lp, cfg.tau, mask)
            v += cfg.lam * tv
        total += v
        if return_grad:
            grads.append(g / S)
    value = total / S
    return (value, grads) if return_grad else value
