"""Standard, maximal, and staged couplings of front processes.

The standard coupling is free under counter-based streams: two trajectories
built from the same master seed share every clock and coin, so once their
full configurations coincide they coincide forever.

The staged procedure re-centres both chains at their fronts, repeatedly
couples a window at distance [L0+1, Ln+] behind the fronts with the maximal
coupling of the two stage laws, fills the rest with the correct conditional
marginals, and then runs shared-randomness dynamics during which equality can
propagate down to the front (event Dn).  Stage laws come either from exact
uniformization of the truncated seen-from-front generator or from empirical
replica estimation; window widths are capped at desk scale, which is enough
to exhibit the mechanism (not the asymptotic rate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from . import core, stats
from .core import Config, FrontedConfig, LazyBernoulli, Params
from .front import hypothesis_H, seen_from_front
from .kernel import Event, SimState, events_to_array
from .streams import EventStream, as_seed, replica_seed


class WidthMismatchError(Exception):
    pass


class PlanInconsistentError(Exception):
    pass


class WindowTooWideError(Exception):
    pass


MAX_COUPLED_WIDTH = 8  # 2^w cells; maximal coupling beyond this is out of scope


# ---------------------------------------------------------------------------
# maximal coupling

@dataclass(frozen=True)
class JointPMF:
    pmf1: np.ndarray
    pmf2: np.ndarray
    overlap: float

    @property
    def tv(self) -> float:
        return 1.0 - self.overlap

    def mismatch_probability(self) -> float:
        return self.tv


def maximal_coupling(pmf1: np.ndarray, pmf2: np.ndarray,
                     rng: np.random.Generator) -> tuple[int, int, JointPMF]:
    """Draw (Y, Y') with the given marginals and P(Y != Y') = TV(pmf1, pmf2).

    Classic construction: with probability `overlap` both take a value from
    the normalized overlap min(pmf1, pmf2); otherwise each takes an
    independent draw from its residual (the residual supports are disjoint,
    so mismatch is certain there).
    """
    pmf1 = np.asarray(pmf1, dtype=float)
    pmf2 = np.asarray(pmf2, dtype=float)
    if pmf1.shape != pmf2.shape:
        raise WidthMismatchError(f"pmf widths differ: {pmf1.shape} vs {pmf2.shape}")
    for pmf in (pmf1, pmf2):
        if abs(pmf.sum() - 1.0) > 1e-9 or (pmf < -1e-12).any():
            raise ValueError("inputs must be pmfs summing to 1")
    m = np.minimum(pmf1, pmf2)
    overlap = float(m.sum())
    joint = JointPMF(pmf1, pmf2, overlap)
    if rng.random() < overlap:
        v = int(rng.choice(len(m), p=m / overlap))
        return v, v, joint
    r1 = pmf1 - m
    r2 = pmf2 - m
    a = int(rng.choice(len(r1), p=r1 / r1.sum()))
    b = int(rng.choice(len(r2), p=r2 / r2.sum()))
    return a, b, joint


# ---------------------------------------------------------------------------
# standard coupling

@dataclass
class CoupledPair:
    state_a: SimState
    state_b: SimState

    def step_to(self, t: float) -> tuple[list[Event], list[Event]]:
        return self.state_a.step_to(t), self.state_b.step_to(t)

    def agreement_window(self, k_max: int = 64) -> int:
        """Largest k with the two seen-from-front configs equal on [1, k]."""
        fa = seen_from_front(self.state_a)
        fb = seen_from_front(self.state_b)
        k = 0
        while k < k_max:
            if fa.get(k + 1, self.state_a.stream) != fb.get(k + 1, self.state_b.stream):
                break
            k += 1
        return k

    def configs_identical(self) -> bool:
        lo = min(self.state_a.window_bounds()[0], self.state_b.window_bounds()[0])
        hi = max(self.state_a.window_bounds()[1], self.state_b.window_bounds()[1])
        return all(self.state_a.value(x) == self.state_b.value(x) for x in range(lo, hi + 1))


def standard_coupling(omega: Config, sigma: Config, t: float, master_seed: int,
                      p: float, margin_factor: float = 3.0) -> CoupledPair:
    """Run both initial configurations under one set of clocks and coins."""
    stream = EventStream(master_seed, p)
    a = SimState.infinite(omega, stream, t, margin_factor)
    b = SimState.infinite(sigma, stream, t, margin_factor)
    pair = CoupledPair(a, b)
    pair.step_to(t)
    return pair


# ---------------------------------------------------------------------------
# truncated seen-from-front generator (Exact stage laws)

def front_process_generator(width: int, p: float) -> np.ndarray:
    """Rate matrix of the process behind the front truncated to sites 1..width.

    Shifts: left jumps at rate q push content right (site 1 becomes empty);
    right jumps at rate p(1-w_1) pull content left and inject a Bernoulli(p)
    value at the border.  Interior East flips read their right neighbour; the
    border site's unseen constraint is closed with its equilibrium weight q.
    """
    q = 1.0 - p
    dim = 1 << width
    mask = dim - 1
    Q = np.zeros((dim, dim))
    top = 1 << (width - 1)
    for w in range(dim):
        # left jump (shift +): new site 1 empty, content moves right
        Q[w, (w << 1) & mask] += q
        # right jump (shift -): needs site 1 empty
        if (w & 1) == 0:
            Q[w, (w >> 1) | top] += p * p
            Q[w, w >> 1] += p * q
        # East flips at sites 1..width-1
        for x in range(1, width):
            if ((w >> x) & 1) == 0:
                cur = (w >> (x - 1)) & 1
                Q[w, w ^ (1 << (x - 1))] += q if cur else p
        # border site: annealed constraint weight q
        cur = (w >> (width - 1)) & 1
        Q[w, w ^ top] += q * (q if cur else p)
    np.fill_diagonal(Q, Q.diagonal() - Q.sum(axis=1))
    return Q


@lru_cache(maxsize=16)
def _front_transition_matrix(width: int, p: float, t: float) -> np.ndarray:
    return sla.expm(front_process_generator(width, p) * t)


# ---------------------------------------------------------------------------
# stage plan

@dataclass(frozen=True)
class StagePlan:
    L0: int
    n_stages: int
    t0: float
    tc: float
    tpc: float
    v_hi: float
    window_cap: int = 4  # Ln+ - L0 cap at desk scale
    trunc_width: int = MAX_COUPLED_WIDTH

    def __post_init__(self):
        if self.L0 + self.window_cap > self.trunc_width:
            raise WindowTooWideError(
                f"L0 + cap = {self.L0 + self.window_cap} exceeds truncation {self.trunc_width}"
            )

    @property
    def total_time(self) -> float:
        return self.t0 + self.n_stages * (self.tc + self.tpc)

    def t_n(self, n: int) -> float:
        return self.t0 + n * (self.tc + self.tpc)

    def L_plus_theory(self, n: int) -> float:
        return self.L0 + self.v_hi * (self.t_n(self.n_stages) - self.t_n(n))

    def L_plus(self, n: int) -> int:
        """Theoretical L0 + v_hi (tN - tn), capped at desk scale."""
        return min(self.L0 + self.window_cap, math.ceil(self.L_plus_theory(n)))

    def validate_total(self, t: float) -> None:
        if abs(self.total_time - t) > 1e-9:
            raise PlanInconsistentError(
                f"t = {t} but t0 + N(tc + tpc) = {self.total_time}"
            )


def dn_lower_bound(L0: int, tpc: float, q: float) -> float:
    """The displayed product lower bound on P(Dn)."""
    return (
        math.exp(-3.0 * tpc)
        * q**L0
        * 2.0**-L0
        * math.exp(-2.0 * tpc)
        * (2.0 * tpc) ** L0
        / math.factorial(L0)
    )


def gn_bound_plugin(L0: int, tpc: float, q: float) -> float:
    """Delta-hat with P(Gn | Hn-1) >= e^{-Delta L0}: plug in the bound chain,
    taking the (q - K(...)) factor at its leading value q."""
    bound = dn_lower_bound(L0, tpc, q) * q
    return -math.log(bound) / L0


def default_stage_plan(L0: int, n_stages: int, params: Params, beta: float = 1.0,
                       t0: float = 4.0, tc: float | None = None) -> StagePlan:
    return StagePlan(
        L0=L0,
        n_stages=n_stages,
        t0=t0,
        tc=float(L0**2) if tc is None else tc,
        tpc=beta * L0,
        v_hi=params.v_hi,
    )


# ---------------------------------------------------------------------------
# event Dn

def detect_Dn(events: np.ndarray, L0: int, Ln_plus: int, tpc: float,
              t_start: float = 0.0) -> bool:
    """Exact transliteration of the propagation event on a stage's ring log.

    Sites are in the frame with both fronts at 0 at stage start.  Requires:
    the clocks at L0, L0-1, ..., 1 ring in that order before tpc, each ring
    at site L0+1-i preceding the first ring at the site on its right after
    the previous step (T_i^- < T_i^+), the coins attached to the T_i^- all 0,
    and no ring at sites -1, 0 and Ln_plus + 1 before tpc.
    """
    t = events["time"] - t_start
    s = events["site"]
    coins = events["coin"]
    in_span = (t >= 0) & (t <= tpc)
    for quiet in (-1, 0, Ln_plus + 1):
        if np.any(in_span & (s == quiet)):
            return False

    def first_after(site: int, after: float) -> tuple[float, int] | None:
        mask = in_span & (s == site) & (t > after)
        if not mask.any():
            return None
        idx = int(np.argmin(np.where(mask, t, np.inf)))
        return float(t[idx]), idx

    prev = -np.inf
    for i in range(1, L0 + 1):
        minus_site = L0 + 1 - i
        plus_site = L0 + 2 - i
        got_minus = first_after(minus_site, prev)
        if got_minus is None:
            return False
        t_minus, idx_minus = got_minus
        got_plus = first_after(plus_site, prev)
        t_plus = got_plus[0] if got_plus is not None else math.inf
        if not (t_minus < t_plus):
            return False
        if coins[idx_minus] != 0:
            return False
        prev = t_minus
    return True


# ---------------------------------------------------------------------------
# staged coupling

@dataclass
class StageReport:
    n: int
    Hn: bool
    Dn: bool
    Gn: bool
    agreement_window: int
    success: bool


@dataclass
class StagedCouplingResult:
    success: bool
    plan: StagePlan
    stages: list[StageReport]
    final_codes: tuple[int, int]
    dn_propagation_checked: int = 0
    dn_propagation_violations: int = 0

    def to_json_dict(self) -> dict:
        return {
            "success": self.success,
            "L0": self.plan.L0,
            "plan": {
                "N": self.plan.n_stages,
                "t0": self.plan.t0,
                "tc": self.plan.tc,
                "tpc": self.plan.tpc,
                "window_cap": self.plan.window_cap,
            },
            "stages": [
                {"n": s.n, "Hn": s.Hn, "Dn": s.Dn, "Gn": s.Gn,
                 "agreement_window": s.agreement_window}
                for s in self.stages
            ],
        }


def _code_of(fc: Config, width: int, stream: EventStream) -> int:
    code = 0
    for x in range(1, width + 1):
        if fc.get(x, stream) == 1:
            code |= 1 << (x - 1)
    return code


def _config_from_code(code: int, width: int, p: float) -> FrontedConfig:
    cells = [0] + [(code >> (x - 1)) & 1 for x in range(1, width + 1)]
    return FrontedConfig(0, tuple(cells), LazyBernoulli(p))


def _window_bits(code: int, lo_site: int, hi_site: int) -> int:
    return (code >> (lo_site - 1)) & ((1 << (hi_site - lo_site + 1)) - 1)


def _marginal_on_window(dist: np.ndarray, width: int, lo_site: int, hi_site: int) -> np.ndarray:
    w = hi_site - lo_site + 1
    out = np.zeros(1 << w)
    codes = np.arange(len(dist))
    sub = (codes >> (lo_site - 1)) & ((1 << w) - 1)
    np.add.at(out, sub, dist)
    return out


def _conditional_draw(dist: np.ndarray, width: int, lo_site: int, hi_site: int,
                      window_value: int, rng: np.random.Generator) -> int:
    codes = np.arange(len(dist))
    sub = (codes >> (lo_site - 1)) & ((1 << (hi_site - lo_site + 1)) - 1)
    mask = sub == window_value
    weights = dist * mask
    total = weights.sum()
    if total <= 0:
        # the maximal coupling can draw a window of probability ~0 under one
        # marginal only through rounding; fall back to uniform over the slice
        weights = mask.astype(float)
        total = weights.sum()
    return int(rng.choice(len(dist), p=weights / total))


def _empirical_stage_law(code: int, plan: StagePlan, params: Params,
                         stage_seed: int, chain_tag: int, replicas: int,
                         lo_site: int, hi_site: int) -> tuple[np.ndarray, np.ndarray]:
    """Stage law on the window by replica estimation; returns (window pmf,
    sampled full codes) so conditional filling can reject against them."""
    width = plan.trunc_width
    w = hi_site - lo_site + 1
    counts = np.zeros(1 << w)
    full_codes = np.empty(replicas, dtype=np.int64)
    for r in range(replicas):
        seed = replica_seed(as_seed(stage_seed), (chain_tag << 24) | r)
        stream = EventStream(int(seed), params.p)
        state = SimState.infinite(_config_from_code(code, width, params.p),
                                  stream, plan.tc, margin_factor=1.0, keep_log=False)
        state.step_to(plan.tc)
        fc = seen_from_front(state)
        full = _code_of(fc, width, stream)
        full_codes[r] = full
        counts[_window_bits(full, lo_site, hi_site)] += 1
    return counts / counts.sum(), full_codes


def staged_coupling(omega: FrontedConfig, sigma: FrontedConfig, plan: StagePlan,
                    params: Params, master_seed: int, window_mode: str = "exact",
                    empirical_replicas: int = 10_000,
                    check_hypothesis: bool = True) -> StagedCouplingResult:
    """Theorem-style iterative coupling of the processes seen from the front.

    window_mode 'exact' evolves the truncated seen-from-front generator by
    uniformized matrix exponential and samples stage windows and conditional
    fills from the exact truncated law; 'empirical' estimates stage laws from
    independent replicas and fills by rejection.
    """
    if window_mode not in ("exact", "empirical"):
        raise ValueError("window_mode must be 'exact' or 'empirical'")
    width = plan.trunc_width
    p = params.p
    master = as_seed(master_seed)
    rng = np.random.default_rng(int(replica_seed(master, 0x5AFE)))

    # phase 0: standard coupling on [0, t0]
    stream0 = EventStream(int(replica_seed(master, 0)), p)
    a0 = SimState.infinite(omega, stream0, plan.t0, margin_factor=1.0, keep_log=False)
    b0 = SimState.infinite(sigma, stream0, plan.t0, margin_factor=1.0, keep_log=False)
    a0.step_to(plan.t0)
    b0.step_to(plan.t0)
    code_a = _code_of(seen_from_front(a0), width, stream0)
    code_b = _code_of(seen_from_front(b0), width, stream0)

    stages: list[StageReport] = []
    dn_checked = 0
    dn_viol = 0
    for n in range(1, plan.n_stages + 1):
        Lp_prev = plan.L_plus(n - 1)
        Lp = plan.L_plus(n)
        succeeded = _window_bits(code_a, 1, Lp_prev) == _window_bits(code_b, 1, Lp_prev)
        stage_seed = int(replica_seed(master, n))
        stream_n = EventStream(stage_seed, p)

        Hn = True
        if check_hypothesis:
            for code in (code_a, code_b):
                cfg = _config_from_code(code, width, p)
                ok, _ = hypothesis_H(cfg, plan.L0, Lp - plan.L0, plan.tc, params,
                                     stream=stream_n)
                Hn = Hn and ok

        if succeeded:
            Dn = False  # not evaluated: the frame is only pinned at stage starts
            if code_a == code_b:
                # identical truncated configs share identical lazy tails and
                # streams, so equality is absorbing: no need to simulate
                pass
            else:
                # already equal near the front: plain shared-randomness dynamics
                sa = SimState.infinite(_config_from_code(code_a, width, p), stream_n,
                                       plan.tc + plan.tpc, margin_factor=1.0,
                                       keep_log=False)
                sb = SimState.infinite(_config_from_code(code_b, width, p), stream_n,
                                       plan.tc + plan.tpc, margin_factor=1.0,
                                       keep_log=False)
                sa.step_to(plan.tc + plan.tpc)
                sb.step_to(plan.tc + plan.tpc)
                code_a = _code_of(seen_from_front(sa), width, sa.stream)
                code_b = _code_of(seen_from_front(sb), width, sb.stream)
        else:
            lo_site, hi_site = plan.L0 + 1, Lp
            if window_mode == "exact":
                P = _front_transition_matrix(width, p, plan.tc)
                dist_a = P[code_a]
                dist_b = P[code_b]
                pmf_a = _marginal_on_window(dist_a, width, lo_site, hi_site)
                pmf_b = _marginal_on_window(dist_b, width, lo_site, hi_site)
                wa, wb, _ = maximal_coupling(pmf_a, pmf_b, rng)
                code_a = _conditional_draw(dist_a, width, lo_site, hi_site, wa, rng)
                code_b = _conditional_draw(dist_b, width, lo_site, hi_site, wb, rng)
            else:
                pmf_a, pool_a = _empirical_stage_law(code_a, plan, params, stage_seed,
                                                     1, empirical_replicas, lo_site, hi_site)
                pmf_b, pool_b = _empirical_stage_law(code_b, plan, params, stage_seed,
                                                     2, empirical_replicas, lo_site, hi_site)
                wa, wb, _ = maximal_coupling(pmf_a, pmf_b, rng)
                code_a = _reject_fill(pool_a, lo_site, hi_site, wa, rng)
                code_b = _reject_fill(pool_b, lo_site, hi_site, wb, rng)

            windows_equal = _window_bits(code_a, lo_site, hi_site) == _window_bits(
                code_b, lo_site, hi_site)
            zero_at = ((code_a >> plan.L0) & 1) == 0 and ((code_b >> plan.L0) & 1) == 0

            # propagation phase under shared randomness
            sa = SimState.infinite(_config_from_code(code_a, width, p), stream_n,
                                   plan.tpc, margin_factor=1.0, keep_log=False)
            sb = SimState.infinite(_config_from_code(code_b, width, p), stream_n,
                                   plan.tpc, margin_factor=1.0, keep_log=False)
            ev_a = sa.step_to(plan.tpc)
            sb.step_to(plan.tpc)
            Dn = detect_Dn(events_to_array(ev_a), plan.L0, Lp, plan.tpc)
            pre_a, pre_b = code_a, code_b
            code_a = _code_of(seen_from_front(sa), width, sa.stream)
            code_b = _code_of(seen_from_front(sb), width, sb.stream)
            if windows_equal and zero_at and Dn:
                dn_checked += 1
                if _window_bits(code_a, 1, Lp) != _window_bits(code_b, 1, Lp):
                    dn_viol += 1

        agree = 0
        while agree < width and _window_bits(code_a, agree + 1, agree + 1) == _window_bits(
                code_b, agree + 1, agree + 1):
            agree += 1
        succ_now = _window_bits(code_a, 1, Lp) == _window_bits(code_b, 1, Lp)
        Gn = (not succeeded) and succ_now and Dn
        stages.append(StageReport(n=n, Hn=Hn, Dn=Dn, Gn=Gn,
                                  agreement_window=agree, success=succ_now))

    final_ok = _window_bits(code_a, 1, plan.L0) == _window_bits(code_b, 1, plan.L0)
    return StagedCouplingResult(
        success=final_ok,
        plan=plan,
        stages=stages,
        final_codes=(code_a, code_b),
        dn_propagation_checked=dn_checked,
        dn_propagation_violations=dn_viol,
    )


def _reject_fill(pool: np.ndarray, lo_site: int, hi_site: int, window_value: int,
                 rng: np.random.Generator, max_tries: int = 10_000) -> int:
    """Conditional fill in empirical mode: resample the pool until the window
    matches the maximal-coupling draw."""
    w = hi_site - lo_site + 1
    sub = (pool >> (lo_site - 1)) & ((1 << w) - 1)
    matches = np.flatnonzero(sub == window_value)
    if len(matches) == 0:
        # no pool member matches: fall back to forcing the window bits
        base = int(pool[rng.integers(len(pool))])
        cleared = base & ~(((1 << w) - 1) << (lo_site - 1))
        return cleared | (window_value << (lo_site - 1))
    return int(pool[matches[rng.integers(len(matches))]])
