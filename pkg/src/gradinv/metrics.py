"""Reconstruction quality metrics and batch assignment.

Reconstructed batches come back in an arbitrary order (mini-batch replay
follows the client's shuffle), so scoring first solves the minimum-MSE
assignment between reconstructions and ground truth.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_ZERO_MSE = 1e-12


def _check_pair(d, d_prime):
    d = np.asarray(d, dtype=np.float64)
    d_prime = np.asarray(d_prime, dtype=np.float64)
    if d.shape != d_prime.shape:
        raise ValueError(f"image shapes differ: {d.shape} vs {d_prime.shape}")
    return d, d_prime


def clamp01(img):
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def mse(d, d_prime):
    d, d_prime = _check_pair(d, d_prime)
    return float(((d - d_prime) ** 2).mean())


def psnr(d, d_prime):
    """Peak signal-to-noise ratio in dB against the ground-truth maximum.

    Returns inf when the images agree to numerical precision; an all-zero
    ground truth has no defined peak and is rejected.
    """
    d, d_prime = _check_pair(d, d_prime)
    peak = float(d.max())
    if peak == 0.0:
        raise ValueError("psnr undefined for an all-zero ground-truth image")
    err = mse(d, d_prime)
    if err < PSNR_ZERO_MSE:
        return float("inf")
    return 10.0 * math.log10(peak * peak / err)


def ssim(d, d_prime, value_range=1.0):
    """Global-statistics structural similarity, channel scores averaged.

    Uses whole-image means, population variances, and covariance per
    channel with c1 = (0.01 H)^2, c2 = (0.03 H)^2 for value range H.
    """
    d, d_prime = _check_pair(d, d_prime)
    if d.ndim == 2:
        d = d[None]
        d_prime = d_prime[None]
    c1 = (SSIM_K1 * value_range) ** 2
    c2 = (SSIM_K2 * value_range) ** 2
    scores = []
    for a, b in zip(d, d_prime):
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                      ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(scores))


MAX_ASSIGNMENT = 16


def match_batches(truth, recon):
    """Minimum-total-MSE assignment of reconstructions to ground truth.

    Returns ``(perm, costs)`` where ``recon[perm[i]]`` is matched to
    ``truth[i]``. Reconstruction lists are scored as-is; clamp first if
    needed.
    """
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if len(truth) != len(recon):
        raise ValueError(
            f"batch sizes differ: {len(truth)} truth vs {len(recon)} recon")
    n = len(truth)
    if n > MAX_ASSIGNMENT:
        raise ValueError(f"assignment limited to {MAX_ASSIGNMENT} images")
    cost = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            cost[i, j] = mse(truth[i], recon[j])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=int)
    perm[rows] = cols
    return perm, cost[rows, cols]


def score_batch(truth, recon):
    """Clamp, match, and score a reconstructed batch.

    Returns per-image and batch-mean MSE/PSNR/SSIM against the matched
    pairing, plus the permutation used.
    """
    truth = np.asarray(truth, dtype=np.float64)
    recon = clamp01(recon)
    perm, _ = match_batches(truth, recon)
    per_image = []
    for i in range(len(truth)):
        r = recon[perm[i]]
        per_image.append({
            "mse": mse(truth[i], r),
            "psnr": psnr(truth[i], r),
            "ssim": ssim(truth[i], r),
        })
    batch_mean = {
        key: float(np.mean([row[key] for row in per_image]))
        for key in ("mse", "psnr", "ssim")
    }
    return {
        "permutation": perm.tolist(),
        "per_image": per_image,
        "batch_mean": batch_mean,
    }
