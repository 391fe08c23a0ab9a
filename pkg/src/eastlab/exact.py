"""Exact finite-volume oracle: generator, stationarity, gap, time evolution.

States of the N-site chain are integers 0..2^N-1 with bit (x-1) holding the
occupation of site x (LSB = site 1, the leftmost).  Site N's constraint is
read from the boundary bit at N+1; only the zero boundary gives an ergodic
chain.  Everything here is dense linear algebra, deliberately independent of
the event-driven kernel so the two can check each other.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

MAX_SITES = 12


class TooLargeError(Exception):
    pass


class NumericalFailureError(Exception):
    pass


class FitDegenerateError(Exception):
    pass


@dataclass(frozen=True)
class GeneratorMatrix:
    n_sites: int
    boundary_zero: bool
    p: float
    Q: np.ndarray  # 2^N x 2^N, rows sum to zero

    @property
    def dim(self) -> int:
        return 1 << self.n_sites

    def mu(self) -> np.ndarray:
        """Product Bernoulli(p) stationary weights over the 2^N states."""
        p, q = self.p, 1.0 - self.p
        n = self.n_sites
        w = np.arange(self.dim)
        ones = np.array([bin(s).count("1") for s in range(self.dim)])
        del w
        return p**ones * q ** (n - ones)


def build_generator(n_sites: int, boundary_zero: bool, p: float) -> GeneratorMatrix:
    """Exact rate matrix Q(w, w^x) = (1 - w_{x+1}) (p(1-w_x) + q w_x)."""
    if not (1 <= n_sites <= MAX_SITES):
        raise TooLargeError(f"n_sites must be in [1, {MAX_SITES}], got {n_sites}")
    q = 1.0 - p
    dim = 1 << n_sites
    Q = np.zeros((dim, dim))
    for w in range(dim):
        total = 0.0
        for x in range(n_sites):  # bit x holds site x+1
            if x + 1 < n_sites:
                nb = (w >> (x + 1)) & 1
            else:
                nb = 0 if boundary_zero else 1
            if nb == 0:
                cur = (w >> x) & 1
                rate = q if cur == 1 else p
                Q[w, w ^ (1 << x)] = rate
                total += rate
        Q[w, w] = -total
    return GeneratorMatrix(n_sites, boundary_zero, p, Q)


def stationary_check(gen: GeneratorMatrix) -> float:
    """Max detailed-balance residual |mu(w)Q(w,w') - mu(w')Q(w',w)|."""
    mu = gen.mu()
    F = mu[:, None] * gen.Q
    return float(np.max(np.abs(F - F.T)))


def spectral_gap(gen: GeneratorMatrix) -> float:
    """Second-smallest eigenvalue of -Q, via the reversible symmetrization."""
    if not gen.boundary_zero:
        raise ValueError("spectral gap needs the zero boundary (irreducible chain)")
    mu = gen.mu()
    d = np.sqrt(mu)
    S = (d[:, None] * (-gen.Q)) / d[None, :]
    S = 0.5 * (S + S.T)
    try:
        evals = sla.eigh(S, eigvals_only=True, subset_by_index=[0, 1])
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise NumericalFailureError(str(exc)) from exc
    if abs(evals[0]) > 1e-8:
        raise NumericalFailureError(f"smallest eigenvalue {evals[0]} is not ~0")
    return float(evals[1])


@lru_cache(maxsize=32)
def reference_gap(p: float, n_sites: int = MAX_SITES) -> float:
    """Default gap estimate: the largest feasible finite volume, cached.

    The infinite-volume gap has no closed form; reports must carry this
    provenance (finite N, zero boundary).
    """
    return spectral_gap(build_generator(n_sites, True, p))


def _uniformization_terms(lam_t: float, tol: float = 1e-10) -> int:
    """Smallest K with Poisson(lam_t) tail mass beyond K below tol."""
    if lam_t <= 0.0:
        return 0
    k = 0
    term = math.exp(-lam_t)
    acc = term
    while acc < 1.0 - tol:
        k += 1
        term *= lam_t / k
        acc += term
        if k > 100_000:  # pragma: no cover
            raise NumericalFailureError("uniformization did not converge")
    return k


def evolve(gen_or_Q, dist: np.ndarray, t: float, tol: float = 1e-10) -> np.ndarray:
    """dist . e^{Qt} by uniformization, truncation error below tol.

    Accepts a GeneratorMatrix or a raw rate matrix (rows summing to zero),
    so the seen-from-front generator can reuse it.
    """
    Q = gen_or_Q.Q if isinstance(gen_or_Q, GeneratorMatrix) else gen_or_Q
    dist = np.asarray(dist, dtype=float)
    if abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError("dist must sum to 1")
    lam = float(np.max(-np.diag(Q)))
    if lam == 0.0 or t == 0.0:
        return dist.copy()
    P = np.eye(Q.shape[0]) + Q / lam
    K = _uniformization_terms(lam * t, tol)
    log_w = -lam * t
    out = np.zeros_like(dist)
    vec = dist.copy()
    # accumulate Poisson(lam t)-weighted powers; weights done in log space
    w = math.exp(log_w)
    out += w * vec
    for k in range(1, K + 1):
        vec = vec @ P
        w *= lam * t / k
        out += w * vec
    out = np.clip(out, 0.0, None)
    s = out.sum()
    if abs(s - 1.0) > 1e-9:
        raise NumericalFailureError(f"evolved mass {s} drifted from 1")
    return out


def evolve_function(gen_or_Q, f: np.ndarray, t: float, tol: float = 1e-10) -> np.ndarray:
    """P_t f = e^{Qt} f (column action of the semigroup)."""
    Q = gen_or_Q.Q if isinstance(gen_or_Q, GeneratorMatrix) else gen_or_Q
    f = np.asarray(f, dtype=float)
    lam = float(np.max(-np.diag(Q)))
    if lam == 0.0 or t == 0.0:
        return f.copy()
    P = np.eye(Q.shape[0]) + Q / lam
    K = _uniformization_terms(lam * t, tol)
    out = np.zeros_like(f)
    vec = f.copy()
    w = math.exp(-lam * t)
    out += w * vec
    for k in range(1, K + 1):
        vec = P @ vec
        w *= lam * t / k
        out += w * vec
    return out


def variance_under_mu(gen: GeneratorMatrix, f: np.ndarray) -> float:
    mu = gen.mu()
    m = float(mu @ f)
    return float(mu @ (f - m) ** 2)


def relaxation_rate(
    n_sites: int,
    f: np.ndarray,
    p: float,
    omega0: int | None = None,
    t_grid: np.ndarray | None = None,
    floor: float = 1e-13,
) -> float:
    """Fitted exponential decay rate of |E_omega[f(omega(t))]| on a t-grid.

    f must be mean-zero under the product measure; the fitted rate is
    compared against the spectral gap by callers (decay at least e^{-t gap}).
    """
    gen = build_generator(n_sites, True, p)
    mu = gen.mu()
    f = np.asarray(f, dtype=float)
    if abs(mu @ f) > 1e-9:
        raise ValueError("f must be mean-zero under mu")
    if variance_under_mu(gen, f) < 1e-30:
        raise FitDegenerateError("f is constant")
    if omega0 is None:
        omega0 = gen.dim - 1  # all ones
    if t_grid is None:
        t_grid = np.linspace(0.5, 8.0, 16)
    ys = []
    for t in t_grid:
        ptf = evolve_function(gen, f, float(t))
        ys.append(abs(ptf[omega0]))
    ys = np.asarray(ys)
    keep = ys > floor
    if keep.sum() < 3:
        raise FitDegenerateError("decay below numerical floor on the grid")
    slope, _ = np.polyfit(np.asarray(t_grid)[keep], np.log(ys[keep]), 1)
    return float(-slope)


def exact_csv_rows(n_list, p_list) -> list[dict]:
    """Rows for the `exact` subcommand: N, p, boundary, gap, residual, runtime."""
    rows = []
    for n in n_list:
        for p in p_list:
            t0 = time.perf_counter()
            gen = build_generator(n, True, p)
            gap = spectral_gap(gen)
            res = stationary_check(gen)
            rows.append(
                {
                    "N": n,
                    "p": p,
                    "boundary": "zero",
                    "gap": gap,
                    "residual": res,
                    "runtime": time.perf_counter() - t0,
                }
            )
    return rows
