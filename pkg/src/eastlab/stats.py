"""Shared statistical helpers: TV distance, noise floors, fits, moments."""

from __future__ import annotations

import math

import numpy as np


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance between two pmfs on the same cells."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("pmf shapes differ")
    return 0.5 * float(np.abs(p - q).sum())


def codes_to_pmf(codes: np.ndarray, n_cells: int) -> np.ndarray:
    counts = np.bincount(codes.astype(np.int64), minlength=n_cells).astype(float)
    return counts / counts.sum()


def bits_to_codes(bits: np.ndarray) -> np.ndarray:
    """Pack a (R, w) bit array into integer codes, LSB = first column."""
    w = bits.shape[1]
    weights = (1 << np.arange(w)).astype(np.int64)
    return bits.astype(np.int64) @ weights


def product_bernoulli_pmf(p: float, w: int) -> np.ndarray:
    """Product Bernoulli(p) pmf over width-w bit codes (bit = occupied)."""
    pmf = np.ones(1)
    for _ in range(w):
        pmf = np.concatenate([pmf * (1.0 - p), pmf * p])
    return pmf


def sampling_noise_floor(w: int, replicas: int) -> float:
    """TV-estimate noise floor 0.5 sqrt(2^w / R) for width-w windows."""
    return 0.5 * math.sqrt((1 << w) / replicas)


def empirical_tv_to(codes: np.ndarray, target_pmf: np.ndarray) -> float:
    return tv_distance(codes_to_pmf(codes, len(target_pmf)), target_pmf)


def bootstrap_tv_samples(codes: np.ndarray, target_pmf: np.ndarray, n_boot: int = 200,
                         seed: int = 0) -> tuple[float, np.ndarray]:
    """(tv_hat, bootstrap TV draws) for TV(empirical law, target)."""
    rng = np.random.default_rng(seed)
    n = len(codes)
    pmf_hat = codes_to_pmf(codes, len(target_pmf))
    tvs = np.empty(n_boot)
    for b in range(n_boot):
        counts = rng.multinomial(n, pmf_hat)
        tvs[b] = tv_distance(counts / n, target_pmf)
    return tv_distance(pmf_hat, target_pmf), tvs


def bootstrap_tv_ci(codes: np.ndarray, target_pmf: np.ndarray, n_boot: int = 200,
                    seed: int = 0) -> tuple[float, float]:
    """(tv_hat, bootstrap standard error) for TV(empirical law, target)."""
    tv, tvs = bootstrap_tv_samples(codes, target_pmf, n_boot, seed)
    return tv, float(tvs.std(ddof=1))


def null_tv_two_sample(pooled_pmf: np.ndarray, n1: int, n2: int,
                       n_boot: int = 400, seed: int = 0) -> tuple[float, float]:
    """Mean and sd of the TV between two empirical laws drawn from one pmf.

    Calibrates the pure-sampling-noise contribution to a two-sample TV.
    """
    rng = np.random.default_rng(seed)
    tvs = np.empty(n_boot)
    for b in range(n_boot):
        c1 = rng.multinomial(n1, pooled_pmf) / n1
        c2 = rng.multinomial(n2, pooled_pmf) / n2
        tvs[b] = tv_distance(c1, c2)
    return float(tvs.mean()), float(tvs.std(ddof=1))


def slope_with_ci(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """OLS slope and its 95% half-width (t-based) for a simple regression."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points for a slope CI")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    resid = y - (ym + slope * (x - xm))
    s2 = float((resid**2).sum()) / (n - 2)
    se = math.sqrt(s2 / sxx)
    from scipy import stats as spstats

    tcrit = spstats.t.ppf(0.975, n - 2)
    return slope, tcrit * se


def mean_ci(samples: np.ndarray, z: float = 3.0) -> tuple[float, float]:
    """(mean, z * standard error) over replicas."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    return float(samples.mean()), z * float(se)


def batch_means_ci(path_average: np.ndarray, n_batches: int = 30,
                   z: float = 3.0) -> tuple[float, float]:
    """Batch-means CI for a vector of correlated per-replica time averages."""
    x = np.asarray(path_average, dtype=float)
    n = len(x)
    if n < n_batches:
        return mean_ci(x, z)
    size = n // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    se = means.std(ddof=1) / math.sqrt(n_batches)
    return float(x.mean()), z * float(se)


def poisson_raw_moment(lam: float, r: int) -> float:
    """E[N^r] for N ~ Poisson(lam), via Stirling numbers (Touchard)."""
    s = [[0] * (r + 1) for _ in range(r + 1)]
    s[0][0] = 1
    for n in range(1, r + 1):
        for k in range(1, n + 1):
            s[n][k] = k * s[n - 1][k] + s[n - 1][k - 1]
    return float(sum(s[r][k] * lam**k for k in range(r + 1)))


def poisson_max_moment(lam1: float, lam2: float, r: int, tail: float = 1e-12) -> float:
    """E[max(N1, N2)^r] for independent Poissons, by truncated double sum."""
    from scipy import stats as spstats

    hi1 = int(spstats.poisson.isf(tail, lam1)) + 2 if lam1 > 0 else 1
    hi2 = int(spstats.poisson.isf(tail, lam2)) + 2 if lam2 > 0 else 1
    p1 = spstats.poisson.pmf(np.arange(hi1), lam1)
    p2 = spstats.poisson.pmf(np.arange(hi2), lam2)
    n1 = np.arange(hi1)[:, None]
    n2 = np.arange(hi2)[None, :]
    mx = np.maximum(n1, n2) ** r
    return float((p1[:, None] * p2[None, :] * mx).sum())


def poisson_sf(k: int, lam: float) -> float:
    from scipy import stats as spstats

    return float(spstats.poisson.sf(k - 1, lam))
