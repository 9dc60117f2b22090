"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, quadrature, enumeration) and
shares no code with the implementations it checks.
"""

import math

import numpy as np
from scipy import integrate


def matmul_triple_loop(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def conv2d_direct_sum(x, kernel):
    """Stride-1 zero-padded convolution by explicit summation (2-D only)."""
    h, w = x.shape
    k = kernel.shape[0]
    pad = k // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(k):
                for dj in range(k):
                    ii, jj = i + di - pad, j + dj - pad
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += x[ii, jj] * kernel[di, dj]
            out[i, j] = acc
    return out


def rdp_subsampled_quadrature(q, sigma, alpha):
    """Renyi divergence of the subsampled Gaussian by numerical integration."""

    def integrand(x):
        pdf = math.exp(-x * x / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi))
        ratio = (1 - q) + q * math.exp((2 * x - 1) / (2 * sigma**2))
        return pdf * ratio**alpha

    hi = alpha + 40 * sigma
    val, _ = integrate.quad(integrand, -40 * sigma, hi, limit=400)
    return math.log(val) / (alpha - 1)


def normal_quantile_bisection(p, tol=1e-12):
    """Inverse standard-normal CDF via quadrature of the density + bisection."""

    def cdf(x):
        val, _ = integrate.quad(
            lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -40, x,
            limit=400)
        return val

    lo, hi = -10.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def student_t_two_sided_p(t, df):
    """Two-sided tail probability by quadrature of the t density."""

    def pdf(x):
        return (math.gamma((df + 1) / 2)
                / (math.sqrt(df * math.pi) * math.gamma(df / 2))
                * (1 + x * x / df) ** (-(df + 1) / 2))

    tail, _ = integrate.quad(pdf, abs(t), 200, limit=400)
    return 2 * tail


def forward_dense_relu_loops(x, w1, b1, w2, b2):
    """Two-layer dense net forward with explicit loops (single sample)."""
    h = np.zeros(w1.shape[0])
    for o in range(w1.shape[0]):
        acc = b1[o]
        for i in range(w1.shape[1]):
            acc += w1[o, i] * x[i]
        h[o] = max(acc, 0.0)
    out = np.zeros(w2.shape[0])
    for o in range(w2.shape[0]):
        acc = b2[o]
        for i in range(w2.shape[1]):
            acc += w2[o, i] * h[i]
        out[o] = acc
    return out


def exhaustive_best_match(samples, recons, score_fn):
    """Double-loop nearest assignment: returns (best index, best score) rows."""
    out = []
    for s in samples:
        scores = [score_fn(s, r) for r in recons]
        dists = [1.0 - v for v in scores]
        best = min(range(len(recons)), key=lambda i: (dists[i], i))
        out.append((best, scores[best]))
    return out


def zipf_counts(n, n_classes, exponent):
    """Largest-remainder power-law class counts (enumeration oracle)."""
    weights = [(k + 1.0) ** (-exponent) for k in range(n_classes)]
    total = sum(weights)
    shares = [w / total * n for w in weights]
    counts = [math.floor(s) for s in shares]
    remainders = sorted(range(n_classes), key=lambda k: shares[k] - counts[k],
                        reverse=True)
    for k in remainders[: n - sum(counts)]:
        counts[k] += 1
    return counts
