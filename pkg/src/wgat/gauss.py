"""Closed-form distances between diagonal Gaussian embeddings.

A Gaussian embedding is a mean vector plus a per-dimension variance vector.
Every "W2" in this package is the *squared* 2-Wasserstein distance

    ||mu_a - mu_b||^2 + sum_d (sqrt(var_a[d]) - sqrt(var_b[d]))^2

which is the diagonal form of the commuting-covariance trace expression.

The module has two layers: small scalar helpers that take
:class:`GaussianEmbedding` objects (used by tests and analysis code), and
row-wise / pairwise array kernels with their analytic adjoints (used by the
gradient engine).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianEmbedding:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        variance = np.asarray(self.variance, dtype=np.float64).reshape(-1)
        if mean.shape != variance.shape:
            raise ValueError(
                f"mean and variance lengths differ: {mean.shape[0]} vs {variance.shape[0]}"
            )
        if not np.all(variance > 0):
            raise ValueError("variance entries must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_pair(a: GaussianEmbedding, b: GaussianEmbedding) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def _check_rows(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for arr in arrays[1:]:
        if arr.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {arr.shape}")


# --------------------------------------------------------------------------
# scalar API


def w2_squared(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    _check_pair(a, b)
    return float(w2_squared_rows(a.mean, a.variance, b.mean, b.variance))


def kl_divergence(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """KL(a || b) for diagonal Gaussians. Asymmetric."""
    _check_pair(a, b)
    return float(kl_rows(a.mean, a.variance, b.mean, b.variance))


def jeffreys_divergence(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Symmetrised KL, 0.5 * (KL(a||b) + KL(b||a))."""
    _check_pair(a, b)
    return float(jeffreys_rows(a.mean, a.variance, b.mean, b.variance))


def prediction_score(u: GaussianEmbedding, i: GaussianEmbedding) -> float:
    return -w2_squared(u, i)


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def lipschitz_score_from_distance(distance, tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return sigmoid(-np.asarray(distance, dtype=np.float64)) / tau


def lipschitz_score(u: GaussianEmbedding, i: GaussianEmbedding, tau: float) -> float:
    """Contrastive score (1/tau) * sigmoid(-W2(u, i)), bounded in (0, 1/tau)."""
    return float(lipschitz_score_from_distance(w2_squared(u, i), tau))


def w2_squared_partials(a: GaussianEmbedding, b: GaussianEmbedding):
    """Return (d/d mean_a, d/d var_a, d/d mean_b, d/d var_b) of w2_squared."""
    _check_pair(a, b)
    return w2_rows_partials(a.mean, a.variance, b.mean, b.variance)


# --------------------------------------------------------------------------
# row-wise kernels: inputs (..., D), outputs (...)


def w2_squared_rows(mean_a, var_a, mean_b, var_b) -> np.ndarray:
    _check_rows(mean_a, var_a, mean_b, var_b)
    diff = mean_a - mean_b
    sdiff = np.sqrt(var_a) - np.sqrt(var_b)
    out = np.sum(diff * diff, axis=-1) + np.sum(sdiff * sdiff, axis=-1)
    return np.maximum(out, 0.0)


def w2_rows_partials(mean_a, var_a, mean_b, var_b):
    d_mean_a = 2.0 * (mean_a - mean_b)
    ratio = np.sqrt(var_b / var_a)
    d_var_a = 1.0 - ratio
    d_var_b = 1.0 - 1.0 / ratio
    return d_mean_a, d_var_a, -d_mean_a, d_var_b


def kl_rows(mean_a, var_a, mean_b, var_b) -> np.ndarray:
    _check_rows(mean_a, var_a, mean_b, var_b)
    diff = mean_b - mean_a
    terms = diff * diff / var_b + var_a / var_b - 1.0 + np.log(var_b) - np.log(var_a)
    return np.maximum(0.5 * np.sum(terms, axis=-1), 0.0)


def kl_rows_partials(mean_a, var_a, mean_b, var_b):
    diff = mean_a - mean_b
    inv_b = 1.0 / var_b
    d_mean_a = diff * inv_b
    d_var_a = 0.5 * (inv_b - 1.0 / var_a)
    d_var_b = 0.5 * (inv_b - (diff * diff + var_a) * inv_b * inv_b)
    return d_mean_a, d_var_a, -d_mean_a, d_var_b


def jeffreys_rows(mean_a, var_a, mean_b, var_b) -> np.ndarray:
    _check_rows(mean_a, var_a, mean_b, var_b)
    diff = mean_a - mean_b
    terms = diff * diff * (1.0 / var_a + 1.0 / var_b) + var_a / var_b + var_b / var_a - 2.0
    return np.maximum(0.25 * np.sum(terms, axis=-1), 0.0)


def jeffreys_rows_partials(mean_a, var_a, mean_b, var_b):
    diff = mean_a - mean_b
    ra, rb = 1.0 / var_a, 1.0 / var_b
    d_mean_a = 0.5 * diff * (ra + rb)
    d_var_a = 0.25 * (rb - (diff * diff + var_b) * ra * ra)
    d_var_b = 0.25 * (ra - (diff * diff + var_a) * rb * rb)
    return d_mean_a, d_var_a, -d_mean_a, d_var_b


# --------------------------------------------------------------------------
# pairwise kernels: inputs (B, D) and (C, D), outputs (B, C)
#
# Both expand the per-dimension sums into matrix products so that the B x C x D
# tensor is never materialised.


def w2_squared_pairwise(mean_a, var_a, mean_b, var_b) -> np.ndarray:
    xa = np.concatenate([mean_a, np.sqrt(var_a)], axis=1)
    xb = np.concatenate([mean_b, np.sqrt(var_b)], axis=1)
    sq_a = np.einsum("ij,ij->i", xa, xa)
    sq_b = np.einsum("ij,ij->i", xb, xb)
    out = sq_a[:, None] + sq_b[None, :] - 2.0 * (xa @ xb.T)
    return np.maximum(out, 0.0)


def w2_pairwise_vjp(grad, mean_a, var_a, mean_b, var_b):
    """Pull a (B, C) upstream gradient back onto the four inputs.

    Row sums of the per-pair partials, e.g.
    d/d var_a[i] = sum_j grad[i, j] * (1 - sqrt(var_b[j] / var_a[i])).
    """
    dim = mean_a.shape[1]
    row = grad.sum(axis=1)[:, None]
    col = grad.sum(axis=0)[:, None]
    sa, sb = np.sqrt(var_a), np.sqrt(var_b)
    ga = grad @ np.concatenate([mean_b, sb], axis=1)
    gb = grad.T @ np.concatenate([mean_a, sa], axis=1)
    d_mean_a = 2.0 * (row * mean_a - ga[:, :dim])
    d_mean_b = 2.0 * (col * mean_b - gb[:, :dim])
    d_var_a = row - ga[:, dim:] / sa
    d_var_b = col - gb[:, dim:] / sb
    return d_mean_a, d_var_a, d_mean_b, d_var_b


def jeffreys_pairwise(mean_a, var_a, mean_b, var_b) -> np.ndarray:
    ra, rb = 1.0 / var_a, 1.0 / var_b
    ma2, mb2 = mean_a * mean_a, mean_b * mean_b
    dim = mean_a.shape[1]
    # sum_d (ma - mb)^2 (ra + rb) + va rb + vb ra, expanded term by term
    out = (
        np.sum(ma2 * ra, axis=1)[:, None]
        + np.sum(mb2 * rb, axis=1)[None, :]
        + ma2 @ rb.T
        + ra @ mb2.T
        - 2.0 * ((mean_a * ra) @ mean_b.T)
        - 2.0 * (mean_a @ (mean_b * rb).T)
        + var_a @ rb.T
        + ra @ var_b.T
    )
    return np.maximum(0.25 * out - 0.5 * dim, 0.0)


def jeffreys_pairwise_vjp(grad, mean_a, var_a, mean_b, var_b):
    return (*_jeffreys_half_vjp(grad, mean_a, var_a, mean_b, var_b),
            *_jeffreys_half_vjp(grad.T, mean_b, var_b, mean_a, var_a))


def _jeffreys_half_vjp(grad, mean_a, var_a, mean_b, var_b):
    ra, rb = 1.0 / var_a, 1.0 / var_b
    row = grad.sum(axis=1)[:, None]
    g_mb = grad @ mean_b
    g_rb = grad @ rb
    # sum_j g_ij (ma_i - mb_j)(ra_i + rb_j)
    d_mean_a = 0.5 * (mean_a * ra * row + mean_a * g_rb - ra * g_mb - grad @ (mean_b * rb))
    # sum_j g_ij ((ma_i - mb_j)^2 + vb_j)
    sq = mean_a * mean_a * row - 2.0 * mean_a * g_mb + grad @ (mean_b * mean_b) + grad @ var_b
    d_var_a = 0.25 * (g_rb - ra * ra * sq)
    return d_mean_a, d_var_a
