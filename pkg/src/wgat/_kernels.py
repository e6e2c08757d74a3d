"""Edge-wise numba kernels over compressed-row adjacency.

All loops run in a fixed order, so a given build is bit-reproducible run to run.
fastmath only lets the compiler vectorise the inner reductions.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=True)
def csr_matmul(indptr, indices, data, x):
    """out = A @ x for A given as (indptr, indices, data)."""
    n = indptr.shape[0] - 1
    out = np.zeros((n, x.shape[1]))
    for r in range(n):
        for e in range(indptr[r], indptr[r + 1]):
            c = indices[e]
            w = data[e]
            for k in range(x.shape[1]):
                out[r, k] += w * x[c, k]
    return out


@nb.njit(cache=True, fastmath=True)
def csr_sampled_dot(indptr, indices, g, x):
    """Per stored entry (r, c): dot(g[r], x[c]). Adjoint of csr_matmul w.r.t. data."""
    out = np.empty(indices.shape[0])
    for r in range(indptr.shape[0] - 1):
        for e in range(indptr[r], indptr[r + 1]):
            c = indices[e]
            acc = 0.0
            for k in range(x.shape[1]):
                acc += g[r, k] * x[c, k]
            out[e] = acc
    return out


@nb.njit(cache=True, fastmath=True)
def edge_w2(mean, std, src, dst):
    out = np.empty(src.shape[0])
    for e in range(src.shape[0]):
        a = src[e]
        b = dst[e]
        acc = 0.0
        for k in range(mean.shape[1]):
            t = mean[a, k] - mean[b, k]
            s = std[a, k] - std[b, k]
            acc += t * t + s * s
        out[e] = max(acc, 0.0)
    return out


@nb.njit(cache=True, fastmath=True)
def edge_w2_backward(g, mean, std, src, dst, grad_mean, grad_var):
    """Scatter g[e] * (closed-form W2 partials) into grad_mean / grad_var.

    Same partials as gauss.w2_rows_partials:
    d/d mean_a = 2 (mean_a - mean_b), d/d var_a = 1 - std_b / std_a.
    """
    for e in range(src.shape[0]):
        ge = g[e]
        if ge == 0.0:
            continue
        a = src[e]
        b = dst[e]
        for k in range(mean.shape[1]):
            dm = 2.0 * ge * (mean[a, k] - mean[b, k])
            grad_mean[a, k] += dm
            grad_mean[b, k] -= dm
            grad_var[a, k] += ge * (1.0 - std[b, k] / std[a, k])
            grad_var[b, k] += ge * (1.0 - std[a, k] / std[b, k])


@nb.njit(cache=True)
def segment_softmax(logits, indptr):
    out = np.empty_like(logits)
    for r in range(indptr.shape[0] - 1):
        lo = indptr[r]
        hi = indptr[r + 1]
        if lo == hi:
            continue
        top = logits[lo]
        for e in range(lo + 1, hi):
            if logits[e] > top:
                top = logits[e]
        total = 0.0
        for e in range(lo, hi):
            out[e] = np.exp(logits[e] - top)
            total += out[e]
        for e in range(lo, hi):
            out[e] /= total
    return out


@nb.njit(cache=True)
def segment_softmax_backward(g, alpha, indptr):
    out = np.empty_like(alpha)
    for r in range(indptr.shape[0] - 1):
        lo = indptr[r]
        hi = indptr[r + 1]
        inner = 0.0
        for e in range(lo, hi):
            inner += alpha[e] * g[e]
        for e in range(lo, hi):
            out[e] = alpha[e] * (g[e] - inner)
    return out
