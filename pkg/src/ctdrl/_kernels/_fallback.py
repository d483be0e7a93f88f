"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when the
CTDRL_PURE_PYTHON environment variable is set.
"""

import numpy as np


def quantile_huber_batch(pred, target, kappa):
    """Batched quantile Huber loss and its gradient with respect to pred.

    pred: (B, m) quantile predictions at levels (i - 1/2)/m.
    target: (B, mp) target atoms.
    Returns (loss, grad) where loss averages over the batch and grad has
    pred's shape.
    """
    b, m = pred.shape
    mp = target.shape[1]
    taus = (np.arange(m) + 0.5) / m
    u = target[:, None, :] - pred[:, :, None]  # (B, m, mp)
    weight = np.abs(taus[None, :, None] - (u < 0.0))
    abs_u = np.abs(u)
    quad = abs_u <= kappa
    huber = np.where(quad, 0.5 * u * u, kappa * (abs_u - 0.5 * kappa))
    dhuber = np.where(quad, u, kappa * np.sign(u))
    norm = 1.0 / (b * m * mp * kappa)
    loss = norm * float(np.sum(weight * huber))
    grad = -norm * np.sum(weight * dhuber, axis=2)
    return loss, grad


def wasserstein_sorted(a, b, p):
    """p-transport distance between two equal-size sorted atom vectors."""
    diff = np.abs(a - b)
    if p == 1:
        return float(np.mean(diff))
    return float(np.mean(diff**p) ** (1.0 / p))
