"""Statistical verification layer: speed, invariant measure, TV profiles,
voids, martingale and moment checks, distinguished-zero equilibrium test.

All estimators consume the compiled batch drivers, are deterministic given
(master_seed, spec), and merge replica chunks as order-independent monoids so
worker pools cannot perturb results.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, asdict
from multiprocessing import get_context

import numpy as np

from . import exact, fastpath, stats
from .core import Params
from .kernel import margin_for, chain_crossing_log_bound
from .streams import as_seed

DEFAULT_CONE_OFFSET = 48
DEFAULT_CONE_SPEED = 3.0


class NoiseFloorError(Exception):
    """All TV values sit below the sampling noise floor (reported, not failed)."""


class InsufficientSamplesError(Exception):
    pass


# ---------------------------------------------------------------------------
# batch plumbing

@dataclass(frozen=True)
class FrontBatchSpec:
    """Scenario for the LO-mode batch driver (front starts at 0)."""

    p: float
    t_end: float
    grid: tuple[float, ...]
    init_mode: int = fastpath.INIT_MU_TILDE
    init_bits: tuple[int, ...] = ()
    tail_ones: int = 0
    win_lo: int = 1
    win_hi: int = 1
    anchor_idx: int = -1
    anc_lo: int = 0
    anc_hi: int = 0
    margin_factor: float = 3.0
    cone_offset: int = DEFAULT_CONE_OFFSET
    cone_speed: float = DEFAULT_CONE_SPEED

    def margin_sites(self) -> int:
        return margin_for(self.t_end, self.margin_factor)

    def window_error_bounds(self) -> dict:
        """Reported finite-window error bounds for this scenario.

        `cone`: probability any kept observable differs from the uncut run;
        `outer`: finite-speed bound for influence crossing from beyond the
        window right edge (vacuous when the margin is small by request, e.g.
        p = 0 scenarios where the coins make the tail irrelevant exactly).
        """
        span = int(math.ceil(self.cone_speed * self.t_end)) + 1
        cone = fastpath.cone_error_bound(self.cone_offset, self.cone_speed, span)
        keep = 48 + max(self.win_hi, self.anc_hi) + 2
        gap = self.margin_sites() - keep
        outer = math.exp(chain_crossing_log_bound(max(gap, 0), self.t_end))
        return {"cone": cone, "outer": min(1.0, outer),
                "margin_sites": self.margin_sites()}


@dataclass
class FrontBatchResult:
    x_grid: np.ndarray      # (R, G) front positions at grid times
    i_grid: np.ndarray      # (R, G) integral of 1 - omega_{X(s)+1}
    jumps_left: np.ndarray
    jumps_right: np.ndarray
    ok: np.ndarray
    win: np.ndarray         # (R, win_hi-win_lo+1) final bits relative X(t)
    anc: np.ndarray         # (R, anc_hi-anc_lo+1) final bits relative X(anchor)
    min_front: np.ndarray

    def require_all_ok(self) -> None:
        bad = np.flatnonzero(self.ok != 1)
        if len(bad):
            if (self.ok[bad] == 2).any():
                raise RuntimeError("front jump invariant breached in compiled driver")
            raise RuntimeError(f"{len(bad)} replicas failed to converge their window")


def _run_chunk(args) -> tuple:
    (seed, rep0, nrep, spec) = args
    exp_bits = np.asarray(spec.init_bits, dtype=np.uint8)
    return fastpath.drive_front_batch(
        as_seed(seed), rep0, nrep, spec.p, spec.t_end,
        np.asarray(spec.grid, dtype=np.float64),
        spec.init_mode, exp_bits, spec.tail_ones,
        spec.win_lo, spec.win_hi, spec.anchor_idx, spec.anc_lo, spec.anc_hi,
        spec.margin_sites(), spec.cone_offset, spec.cone_speed,
    )


def default_jobs() -> int:
    env = os.environ.get("EASTLAB_JOBS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 8))


def run_front_batch(spec: FrontBatchSpec, replicas: int, master_seed: int,
                    jobs: int | None = None) -> FrontBatchResult:
    jobs = default_jobs() if jobs is None else max(1, jobs)
    if jobs == 1 or replicas < 64:
        parts = [_run_chunk((master_seed, 0, replicas, spec))]
    else:
        chunk = max(16, replicas // (jobs * 4))
        tasks = []
        r0 = 0
        while r0 < replicas:
            n = min(chunk, replicas - r0)
            tasks.append((master_seed, r0, n, spec))
            r0 += n
        with get_context("fork").Pool(jobs) as pool:
            parts = pool.map(_run_chunk, tasks)
    merged = [np.concatenate([p[i] for p in parts], axis=0) for i in range(8)]
    res = FrontBatchResult(*merged)
    res.require_all_ok()
    return res


def front_positions(params: Params, t: float, replicas: int, master_seed: int,
                    jobs: int | None = None) -> np.ndarray:
    """X(t) across replicas started from mu-tilde (calibration helper)."""
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(t,))
    res = run_front_batch(spec, replicas, master_seed, jobs)
    return res.x_grid[:, -1].astype(float)


def _provenance(master_seed: int, params: Params, spec: FrontBatchSpec | None,
                replicas: int) -> dict:
    out = {
        "seed": int(as_seed(master_seed)),
        "replicas": replicas,
        "params": {
            "p": params.p,
            "v_lo": params.v_lo,
            "v_hi": params.v_hi,
            "gamma": params.gamma,
            "gap_est": params.gap_est,
            "calibration": params.calibration_note,
        },
    }
    if spec is not None:
        out["window"] = spec.window_error_bounds()
    return out


# ---------------------------------------------------------------------------
# front speed and the Theorem-6.1 identity

@dataclass
class SpeedReport:
    p: float
    t: float
    replicas: int
    v_hat: float
    v_ci: float
    rho0_hat: float
    rho0_ci: float
    identity_residual: float
    residual_ci: float
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def front_speed(params: Params, t: float, replicas: int, master_seed: int,
                jobs: int | None = None, margin_factor: float = 3.0,
                init_mode: int = fastpath.INIT_MU_TILDE) -> SpeedReport:
    """LLN estimate of the front speed and the p nu(1-omega_1) - q identity.

    v_hat averages X(t)/t over replicas; rho0_hat is the per-replica time
    average of 1 - omega_{X(s)+1}(s); the residual v_hat - (p rho0_hat - q)
    equals mean(M_t)/t for the front martingale, so it must vanish within CI.
    """
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(t,), init_mode=init_mode,
                          margin_factor=margin_factor)
    res = run_front_batch(spec, replicas, master_seed, jobs)
    v = res.x_grid[:, -1] / t
    rho = res.i_grid[:, -1] / t
    resid = v - (params.p * rho - params.q)
    v_hat, v_ci = stats.mean_ci(v)
    rho_hat, rho_ci = stats.batch_means_ci(rho)
    r_hat, r_ci = stats.mean_ci(resid)
    return SpeedReport(
        p=params.p, t=t, replicas=replicas,
        v_hat=v_hat, v_ci=v_ci, rho0_hat=rho_hat, rho0_ci=rho_ci,
        identity_residual=r_hat, residual_ci=r_ci,
        provenance=_provenance(master_seed, params, spec, replicas),
    )


def speed_sweep(params: Params, t_grid: tuple[float, ...], replicas: int,
                master_seed: int, jobs: int | None = None) -> dict:
    """X(t)/t ensemble SD across a nested time grid (one run, all grid times)."""
    spec = FrontBatchSpec(p=params.p, t_end=max(t_grid), grid=tuple(sorted(t_grid)))
    res = run_front_batch(spec, replicas, master_seed, jobs)
    out = {"t": list(sorted(t_grid)), "sd": [], "v_hat": []}
    for i, t in enumerate(sorted(t_grid)):
        v = res.x_grid[:, i] / t
        out["sd"].append(float(v.std(ddof=1)))
        out["v_hat"].append(float(v.mean()))
    return out


# ---------------------------------------------------------------------------
# invariant measure behind the front

def nu_marginal(params: Params, t: float, k: int, replicas: int, master_seed: int,
                init_mode: int = fastpath.INIT_MU_TILDE, jobs: int | None = None,
                margin_factor: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Empirical pmf of (theta omega(t))|[1,k] and the raw window codes."""
    if k > 12:
        raise ValueError("marginal width capped at 12")
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(t,), init_mode=init_mode,
                          win_lo=1, win_hi=k, margin_factor=margin_factor)
    res = run_front_batch(spec, replicas, master_seed, jobs)
    codes = stats.bits_to_codes(res.win)
    return stats.codes_to_pmf(codes, 1 << k), codes


@dataclass
class ErgodicityReport:
    t: float
    k: int
    replicas: int
    tv: float
    threshold: float
    null_mean: float
    null_sd: float
    passed: bool
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def nu_two_start_compare(params: Params, t: float, k: int, replicas: int,
                         master_seed: int, jobs: int | None = None,
                         slack: float = 0.02) -> ErgodicityReport:
    """Initial-condition independence: mu-tilde start vs single-zero start.

    The threshold is `slack` plus a null calibration of the pure sampling
    noise of a two-sample TV at these replica counts.
    """
    pmf_a, codes_a = nu_marginal(params, t, k, replicas, master_seed,
                                 fastpath.INIT_MU_TILDE, jobs)
    pmf_b, codes_b = nu_marginal(params, t, k, replicas, as_seed(master_seed) + 1,
                                 fastpath.INIT_SINGLE_ZERO, jobs)
    tv = stats.tv_distance(pmf_a, pmf_b)
    pooled = 0.5 * (pmf_a + pmf_b)
    null_mean, null_sd = stats.null_tv_two_sample(pooled, replicas, replicas,
                                                  seed=int(as_seed(master_seed) % (2**31)))
    threshold = slack + null_mean + 3.0 * null_sd
    return ErgodicityReport(
        t=t, k=k, replicas=replicas, tv=tv, threshold=threshold,
        null_mean=null_mean, null_sd=null_sd, passed=bool(tv <= threshold),
        provenance=_provenance(master_seed, params, None, replicas),
    )


# ---------------------------------------------------------------------------
# TV profile behind the front

@dataclass
class TVReport:
    t: float
    w: int
    replicas: int
    L_list: list[int]
    tv: list[float]
    tv_sigma: list[float]
    noise_floor: float
    eps_hat: float | None
    eps_lo: float | None
    eps_hi: float | None
    monotone_within_ci: bool
    fit_points: int
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def tv_behind_front(params: Params, t: float, L_list: list[int], w: int,
                    replicas: int, master_seed: int, jobs: int | None = None,
                    margin_factor: float = 3.0) -> TVReport:
    """TV(law of (theta_L omega(t))|[1,w], Bernoulli(p)^w) for each L.

    The decay-rate fit uses only L values whose TV clears the sampling noise
    floor 0.5 sqrt(2^w / R).
    """
    L_list = sorted(L_list)
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(t,), win_lo=1,
                          win_hi=max(L_list) + w, margin_factor=margin_factor)
    res = run_front_batch(spec, replicas, master_seed, jobs)
    target = stats.product_bernoulli_pmf(params.p, w)
    n_boot = 400
    tvs, sigmas, boots = [], [], []
    for j, L in enumerate(L_list):
        cols = res.win[:, L: L + w]  # sites X+L+1 .. X+L+w (win_lo = 1)
        codes = stats.bits_to_codes(cols)
        tv, draws = stats.bootstrap_tv_samples(
            codes, target, n_boot=n_boot,
            seed=int((as_seed(master_seed) + j) % (2**31)))
        tvs.append(tv)
        sigmas.append(float(draws.std(ddof=1)))
        boots.append(draws)
    floor = stats.sampling_noise_floor(w, replicas)
    above = [i for i, tv in enumerate(tvs) if tv > floor]
    eps_hat = eps_lo = eps_hi = None
    if len(above) >= 2:
        xs = np.array([L_list[i] for i in above], dtype=float)
        eps_hat = -float(np.polyfit(xs, np.log([tvs[i] for i in above]), 1)[0])
        # slope CI from the per-L multinomial bootstrap (sampling noise only;
        # exponential misfit is not the question being asked here)
        slopes = np.empty(n_boot)
        for b in range(n_boot):
            ys = np.log([max(boots[i][b], 1e-12) for i in above])
            slopes[b] = -np.polyfit(xs, ys, 1)[0]
        eps_lo = float(np.quantile(slopes, 0.025))
        eps_hi = float(np.quantile(slopes, 0.975))
    monotone = all(
        tvs[i + 1] <= tvs[i] + 3.0 * math.hypot(sigmas[i], sigmas[i + 1])
        for i in range(len(tvs) - 1)
    )
    return TVReport(
        t=t, w=w, replicas=replicas, L_list=list(L_list), tv=tvs, tv_sigma=sigmas,
        noise_floor=floor, eps_hat=eps_hat, eps_lo=eps_lo, eps_hi=eps_hi,
        monotone_within_ci=monotone, fit_points=len(above),
        provenance=_provenance(master_seed, params, spec, replicas),
    )


# ---------------------------------------------------------------------------
# voids behind the front

@dataclass
class VoidsReport:
    t: float
    anchor_time: float
    replicas: int
    l_list: list[int]
    frequency: list[float]
    bound: list[float]
    passed: bool
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def voids_behind_front(params: Params, t: float, l_list: list[int], replicas: int,
                       master_seed: int, anchor_frac: float = 0.25,
                       jobs: int | None = None) -> VoidsReport:
    """Frequency of {no zero in the l-box left of the front's position at an
    intermediate time}, evaluated at time t.

    The box [X(u)-l, X(u)-1] with u = anchor_frac * t sits behind (right of)
    the time-t front with overwhelming probability; the plug-in bound is
    p^l + p^{l/2} (p^q)^{-l} e^{-(t-u) gap}, the distinguished-zero
    relaxation estimate anchored at the intermediate front.
    """
    if params.gap_est is None:
        raise ValueError("voids bound needs gap_est")
    l_max = max(l_list)
    u = anchor_frac * t
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(u, t), anchor_idx=0,
                          anc_lo=-l_max, anc_hi=-1)
    res = run_front_batch(spec, replicas, master_seed, jobs)
    freqs, bounds = [], []
    s_relax = t - u
    for l in l_list:
        box = res.anc[:, l_max - l:]  # sites X(u)-l .. X(u)-1
        freqs.append(float(np.mean(box.min(axis=1) == 1)))
        slack = (params.p ** (l / 2)) * (params.p_min ** -l) * math.exp(-s_relax * params.gap_est)
        bounds.append(params.p**l + slack)
    passed = all(f <= b for f, b in zip(freqs, bounds))
    return VoidsReport(
        t=t, anchor_time=u, replicas=replicas, l_list=list(l_list),
        frequency=freqs, bound=bounds, passed=passed,
        provenance=_provenance(master_seed, params, spec, replicas),
    )


# ---------------------------------------------------------------------------
# martingale and moments

@dataclass
class MartingaleReport:
    t_grid: list[float]
    replicas: int
    mean_M: list[float]
    mean_ci: list[float]
    var_M: list[float]
    var_slope: float
    mean_within_ci: bool
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def martingale_check(params: Params, t_grid: list[float], replicas: int,
                     master_seed: int, jobs: int | None = None,
                     margin_factor: float = 3.0) -> MartingaleReport:
    """M_t = X(t) - integral of (p(1 - (theta omega)_1) - q) ds, exactly
    integrated event by event; mean must vanish, variance grow at most
    linearly."""
    t_grid = sorted(t_grid)
    spec = FrontBatchSpec(p=params.p, t_end=max(t_grid), grid=tuple(t_grid),
                          margin_factor=margin_factor)
    res = run_front_batch(spec, replicas, master_seed, jobs)
    means, cis, variances = [], [], []
    for i, t in enumerate(t_grid):
        drift = params.p * res.i_grid[:, i] - params.q * t
        m = res.x_grid[:, i] - drift
        mu, ci = stats.mean_ci(m)
        means.append(mu)
        cis.append(ci)
        variances.append(float(np.var(m, ddof=1)))
    slope = float(np.polyfit(t_grid, variances, 1)[0]) if len(t_grid) >= 2 else math.nan
    ok = all(abs(m) <= c for m, c in zip(means, cis))
    return MartingaleReport(
        t_grid=list(t_grid), replicas=replicas, mean_M=means, mean_ci=cis,
        var_M=variances, var_slope=slope, mean_within_ci=ok,
        provenance=_provenance(master_seed, params, spec, replicas),
    )


@dataclass
class MomentReport:
    t: float
    r: int
    replicas: int
    empirical: float
    oracle_bound: float
    pathwise_audit_ok: bool
    passed: bool
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)


def moment_check(params: Params, t: float, r: int, replicas: int, master_seed: int,
                 jobs: int | None = None) -> MomentReport:
    """E|X(t)|^r against the Poisson sandwich max(N_q, N_p)^r with 10% slack.

    The sandwich processes share the graphical construction so they are not
    independent; the oracle uses the independent-max moment, which the slack
    absorbs at these scales.  The pathwise audit checks X(t) = -left + right
    jumps with left jumps exactly the coin-0 rings at the moving site X-1.
    """
    spec = FrontBatchSpec(p=params.p, t_end=t, grid=(t,))
    res = run_front_batch(spec, replicas, master_seed, jobs)
    x = res.x_grid[:, -1].astype(float)
    emp = float(np.mean(np.abs(x) ** r))
    oracle = stats.poisson_max_moment(params.q * t, params.p * t, r) * 1.1
    audit = bool(np.all(res.x_grid[:, -1] == res.jumps_right - res.jumps_left)
                 and np.all(res.x_grid[:, -1] >= -res.jumps_left))
    return MomentReport(
        t=t, r=r, replicas=replicas, empirical=emp, oracle_bound=oracle,
        pathwise_audit_ok=audit, passed=bool(emp <= oracle and audit),
        provenance=_provenance(master_seed, params, spec, replicas),
    )


# ---------------------------------------------------------------------------
# distinguished-zero equilibrium test

@dataclass
class DZBinResult:
    xi: int
    samples: int
    tv: float
    threshold: float
    chi2_pvalue: float
    passed: bool


@dataclass
class DZReport:
    z: int
    volume: int
    t: float
    replicas: int
    bins: list[DZBinResult]
    skipped_bins: list[int]
    passed: bool
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "z": self.z, "volume": self.volume, "t": self.t,
            "replicas": self.replicas,
            "bins": [asdict(b) for b in self.bins],
            "skipped_bins": self.skipped_bins,
            "passed": self.passed,
            "provenance": self.provenance,
        }


def dz_equilibrium_test(params: Params, z: int, volume: int, t: float,
                        replicas: int, master_seed: int,
                        right_bits: tuple[int, ...] | None = None,
                        min_bin: int = 500, slack: float = 0.02) -> DZReport:
    """Per-bin product law left of the distinguished zero.

    East dynamics on [1, volume] with a zero boundary; sites left of z start
    i.i.d. Bernoulli(p), site z starts empty, sites right of z are arbitrary
    (default: equilibrium draws; pass right_bits for adversarial data).
    Conditioning is on xi(t) = v only within a bin, never pooled across v.
    """
    from scipy import stats as spstats

    bits0 = np.zeros(volume, dtype=np.uint8)
    if right_bits is None:
        # equilibrium right side drawn once, deterministic in the seed
        rng = np.random.default_rng(int(as_seed(master_seed) % (2**31)))
        bits0[z:] = (rng.random(volume - z) < params.p).astype(np.uint8)
    else:
        if len(right_bits) != volume - z:
            raise ValueError("right_bits must cover sites z+1..volume")
        bits0[z:] = right_bits
    codes, xis = fastpath.drive_finite_batch(
        as_seed(master_seed), 0, replicas, params.p, volume, 0, t,
        bits0, z, 1,
    )
    bins: list[DZBinResult] = []
    skipped: list[int] = []
    for v in sorted(set(int(x) for x in xis)):
        sel = codes[xis == v]
        if v <= 1:
            continue
        if len(sel) < min_bin:
            skipped.append(v)
            continue
        wleft = v - 1
        left_codes = (sel.astype(np.int64)) & ((1 << wleft) - 1)
        target = stats.product_bernoulli_pmf(params.p, wleft)
        tv = stats.empirical_tv_to(left_codes, target)
        floor = stats.sampling_noise_floor(wleft, len(sel))
        counts = np.bincount(left_codes, minlength=1 << wleft)
        expected = target * len(sel)
        keep = expected > 0
        chi2 = spstats.chisquare(counts[keep], expected[keep])
        bins.append(DZBinResult(
            xi=v, samples=int(len(sel)), tv=tv, threshold=floor + slack,
            chi2_pvalue=float(chi2.pvalue), passed=bool(tv <= floor + slack),
        ))
    if not bins:
        raise InsufficientSamplesError("no xi bin reached the minimum sample count")
    return DZReport(
        z=z, volume=volume, t=t, replicas=replicas, bins=bins,
        skipped_bins=skipped, passed=all(b.passed for b in bins),
        provenance=_provenance(master_seed, params, None, replicas),
    )


# ---------------------------------------------------------------------------
# finite-volume ensemble vs exact oracle

def finite_volume_empirical(params: Params, n_sites: int, boundary_zero: bool,
                            t: float, replicas: int, master_seed: int,
                            init_bits: tuple[int, ...] | None = None) -> np.ndarray:
    """Empirical end-state pmf of the finite-volume kernel (oracle gate input)."""
    bits0 = np.ones(n_sites, dtype=np.uint8) if init_bits is None else \
        np.asarray(init_bits, dtype=np.uint8)
    codes, _ = fastpath.drive_finite_batch(
        as_seed(master_seed), 0, replicas, params.p, n_sites,
        0 if boundary_zero else 1, t, bits0, -1, 0,
    )
    return stats.codes_to_pmf(codes, 1 << n_sites)


def oracle_gate(params: Params, n_sites: int, t: float, replicas: int,
                master_seed: int) -> dict:
    """TV between kernel ensemble and exact uniformization, with its threshold."""
    pmf_emp = finite_volume_empirical(params, n_sites, True, t, replicas, master_seed)
    gen = exact.build_generator(n_sites, True, params.p)
    start = np.zeros(gen.dim)
    start[gen.dim - 1] = 1.0  # all ones
    pmf_exact = exact.evolve(gen, start, t)
    tv = stats.tv_distance(pmf_emp, pmf_exact)
    threshold = 0.01 + 3.0 * math.sqrt((1 << n_sites) / replicas)
    return {"tv": tv, "threshold": threshold, "passed": bool(tv <= threshold),
            "n_sites": n_sites, "t": t, "replicas": replicas}
