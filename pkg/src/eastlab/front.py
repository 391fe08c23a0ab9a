"""Front tracking, distinguished zeros, schedule constants, hypothesis check.

The trackers are kernel listeners (reference engine); large-replica front
statistics come from `fastpath.drive_front_batch`, and the two are
cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import core, exact
from .core import Config, FrontedConfig, Params
from .kernel import Event, SimState, InfiniteWindow, FiniteVolume, HalfLine
from .streams import EventStream


class InvariantBreachError(Exception):
    """A front jump was not +-1: indicates a kernel bug, aborts the run."""


class NotAZeroError(Exception):
    pass


class BadParamsError(Exception):
    pass


class NoZeroWithinPolicyError(Exception):
    pass


# ---------------------------------------------------------------------------
# listeners

@dataclass
class FrontTrajectory:
    times: list[float] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)

    @property
    def jumps(self) -> np.ndarray:
        pos = np.asarray(self.positions)
        return np.diff(pos)

    def left_jumps(self) -> int:
        return int(np.sum(self.jumps == -1))

    def right_jumps(self) -> int:
        return int(np.sum(self.jumps == +1))

    def position_at(self, t: float) -> int:
        i = np.searchsorted(np.asarray(self.times), t, side="right") - 1
        return self.positions[max(i, 0)]


class FrontTracker:
    """Listener recording (time, front) at every front jump; asserts +-1 jumps."""

    def __init__(self, state: SimState):
        if state.front is None:
            raise ValueError("front tracking needs LO mode")
        self.trajectory = FrontTrajectory([state.now], [state.front])
        state.add_listener(self)

    def on_event(self, ev: Event, state: SimState) -> None:
        if not ev.applied:
            return
        last = self.trajectory.positions[-1]
        if state.front != last:
            if abs(state.front - last) != 1:
                raise InvariantBreachError(
                    f"front jumped {last} -> {state.front} at t={ev.time}"
                )
            self.trajectory.times.append(ev.time)
            self.trajectory.positions.append(state.front)


@dataclass
class DistinguishedZeroTrajectory:
    times: list[float]
    positions: list[int]

    def position_at(self, t: float) -> int:
        i = np.searchsorted(np.asarray(self.times), t, side="right") - 1
        return self.positions[max(i, 0)]


class DistinguishedZeroTracker:
    """Listener moving a tagged zero one step right at each legal ring on it."""

    def __init__(self, state: SimState, x0: int):
        if state.value(x0) != 0:
            raise NotAZeroError(f"site {x0} is occupied at attachment time")
        self.trajectory = DistinguishedZeroTrajectory([state.now], [x0])
        state.add_listener(self)

    @property
    def xi(self) -> int:
        return self.trajectory.positions[-1]

    def on_event(self, ev: Event, state: SimState) -> None:
        if ev.site == self.xi and ev.legal:
            new = self.xi + 1
            if state.value(new) != 0:  # pragma: no cover
                raise InvariantBreachError("distinguished zero moved onto an occupied site")
            self.trajectory.times.append(ev.time)
            self.trajectory.positions.append(new)


def seen_from_front(state: SimState) -> FrontedConfig:
    """theta(omega(now)): the window re-centered at the current front."""
    return core.shift_theta(state.snapshot_config(), 0, state.stream)


# ---------------------------------------------------------------------------
# modified fronts

def attach_modified_front(state: SimState, L: int, M: int | None = None) -> SimState:
    """Fork a trajectory that follows the first zero at distance >= L from the
    front as if everything left of it were occupied, driven by the same
    streams.  With M set, a frozen empty boundary is imposed at start+M+1.
    """
    snap = state.snapshot_config()
    x = core.front_position(snap)
    # D_L: first zero at distance >= L
    d = 0
    limit = snap.end + 10_000
    while True:
        site = x + L + d
        if site >= limit:
            raise NoZeroWithinPolicyError("no zero at distance >= L within policy reach")
        try:
            v = snap.get(site, state.stream)
        except core.OutOfWindowError:
            raise NoZeroWithinPolicyError("tail policy cannot produce a zero") from None
        if v == 0:
            break
        d += 1
    start = x + L + d
    if M is None:
        cells = tuple(snap.get(y, state.stream) for y in range(start, max(snap.end, start + 1)))
        cfg = Config(start, cells, snap.right_policy)
        mode = state.mode
        if isinstance(mode, InfiniteWindow):
            mode = InfiniteWindow(mode.horizon, mode.margin_sites, mode.hard_cap)
        fork = SimState(cfg, state.stream, mode, now=state.now, keep_log=state.keep_log)
    else:
        hi = start + M
        cells = tuple(snap.get(y, state.stream) for y in range(start, hi + 1))
        cfg = Config(start, cells, core.Frozen(1))
        fork = SimState(cfg, state.stream, HalfLine(hi, 0),
                        now=state.now, keep_log=state.keep_log)
    return fork


# ---------------------------------------------------------------------------
# schedule constants

class ScheduleCase(Enum):
    CASE1 = 1
    CASE2 = 2
    CASE3 = 3


@dataclass(frozen=True)
class Schedule:
    L: int
    t: float
    alpha: float
    l: int
    s: float
    k: int
    c1: float
    case: ScheduleCase

    def ladder_spacing(self) -> float:
        """Spacing v_lo * alpha of the zero ladder the hypothesis inspects."""
        return self._v_lo * self.alpha

    # stashed for ladder_spacing without re-deriving
    _v_lo: float = 0.0
    _v_hi: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "L": self.L,
            "t": self.t,
            "alpha": self.alpha,
            "l": self.l,
            "s": self.s,
            "k": self.k,
            "case": self.case.name,
        }


def schedule(L: int, t: float, params: Params) -> Schedule:
    """The relaxation schedule (alpha, l, s, k) for distance L and time t.

    alpha = c1 (L ^ 3 v_hi t) with
    c1 = gap / (6 v_hi (2 v_lo + v_hi) ln(1/(p ^ q))); l = floor(v_lo alpha);
    s = (t - L/(3 v_hi)) v alpha when L < 3 v_hi t, else 0;
    k = floor((L - v_lo (t - s)) / (v_lo alpha)) + 2.
    """
    if L < 1 or t <= 0:
        raise BadParamsError("need L >= 1 and t > 0")
    try:
        params.require_schedule_constants()
    except ValueError as exc:
        raise BadParamsError(str(exc)) from exc
    v_lo, v_hi, gap = params.v_lo, params.v_hi, params.gap_est
    c1 = gap / (6.0 * v_hi * (2.0 * v_lo + v_hi) * params.log_inv_pmin())
    alpha = c1 * min(L, 3.0 * v_hi * t)
    l = math.floor(v_lo * alpha)
    if L < 3.0 * v_hi * t:
        s = max(t - L / (3.0 * v_hi), alpha)
    else:
        s = 0.0
    k = math.floor((L - v_lo * (t - s)) / (v_lo * alpha)) + 2
    if 3.0 * v_hi * t <= L:
        case = ScheduleCase.CASE3
    elif math.floor(s / alpha) >= k:
        case = ScheduleCase.CASE1
    else:
        case = ScheduleCase.CASE2
    return Schedule(L=L, t=t, alpha=alpha, l=l, s=s, k=k, c1=c1, case=case,
                    _v_lo=v_lo, _v_hi=v_hi)


def case1_sufficient_L(t: float, params: Params) -> float:
    """The `for instance` sufficient bound: L below v_lo t / (1 + 2 v_lo c1)."""
    sch_c1 = schedule(1, t, params).c1
    return params.v_lo * t / (1.0 + 2.0 * params.v_lo * sch_c1)


def hypothesis_H(config: Config, L0: int, M: int, t: float, params: Params,
                 stream: EventStream | None = None) -> tuple[bool, tuple[int, int] | None]:
    """Spacing condition on the zero ladder for every L in [L0, L0+M].

    True iff for each L and each i <= k(L,t) - floor(s/alpha), the ladder
    with spacing v_lo*alpha(L,t) has Z_i - Z_{i-1} < v_hi*alpha(L,t).
    Returns (ok, witness) with the violating (L, i) on failure.
    """
    ladder_cache: dict[float, core.ZeroLadder] = {}
    for L in range(L0, L0 + M + 1):
        sch = schedule(L, t, params)
        n_cond = sch.k - math.floor(sch.s / sch.alpha)
        if n_cond <= 0:
            continue
        if params.v_hi * sch.alpha <= 1.0:
            # lattice gaps are >= 1, so the strict bound cannot hold
            return False, (L, 1)
        spacing = params.v_lo * sch.alpha
        ladder = ladder_cache.get(spacing)
        # grow the ladder in chunks; violations short-circuit long scans
        checked = 0
        while checked < n_cond:
            want = min(n_cond, max(2 * checked, 64))
            if ladder is None or (len(ladder.positions) - 1 < want and not ladder.truncated):
                ladder = core.zeros_spaced(config, spacing, want, stream)
                ladder_cache[spacing] = ladder
            upto = min(n_cond, len(ladder.positions) - 1) if ladder.truncated else min(n_cond, want)
            for i in range(checked + 1, upto + 1):
                if not (ladder.gap(i) < params.v_hi * sch.alpha):
                    return False, (L, i)
            if ladder.truncated and upto < n_cond:
                return False, (L, upto + 1)
            checked = upto
    return True, None


def remark_t0_constant(params: Params) -> float:
    """Calibrated c such that H(L0, M, t) holds for all configs when
    t >= c (L0 + M); the default plug-in 2/(v_lo c1 3 v_hi), rounded up."""
    params.require_schedule_constants()
    c1 = schedule(1, 1.0, params).c1
    return math.ceil(2.0 / (params.v_lo * c1 * 3.0 * params.v_hi))


# ---------------------------------------------------------------------------
# finite speed of propagation

def finite_speed_monitor(events: np.ndarray, x: int, y: int, t: float) -> bool:
    """Did a chain of successive rings link x to y before t, per the event log."""
    if x == y:
        raise ValueError("need x != y")
    step = 1 if y > x else -1
    sites = range(x, y + step, step)
    tau = -1.0
    ev_t = events["time"]
    ev_s = events["site"]
    for s in sites:
        mask = (ev_s == s) & (ev_t > tau) & (ev_t <= t)
        if not mask.any():
            return False
        tau = float(ev_t[mask].min())
    return True


def chain_bound(n_sites: int, t: float) -> float:
    """P(chain of n successive rings completes by t) <= t^n / n!."""
    if n_sites <= 0:
        return 1.0
    if t <= 0:
        return 0.0
    return math.exp(min(0.0, n_sites * math.log(t) - math.lgamma(n_sites + 1)))


# ---------------------------------------------------------------------------
# calibration

def default_params(p: float, gap_sites: int = exact.MAX_SITES) -> Params:
    """Params with the finite-volume gap estimate and a compliant v_lo."""
    params = Params(p=p)
    out = params.with_defaults(exact.reference_gap(p, gap_sites))
    out.calibration_note += f"; gap from N={gap_sites} zero-boundary spectrum"
    return out


def calibrate_ballistic(p: float, master_seed: int, pilot_t: float = 200.0,
                        replicas: int = 200, quantile: float = 0.001,
                        gap_sites: int = exact.MAX_SITES) -> Params:
    """Estimate v_lo (lower ballistic constant) from pilot front runs.

    v_lo is the `quantile` lower quantile of -X(t)/t, clipped to respect the
    v_lo < gap/ln(1/(p^q)) constraint; gamma is fitted from the frequency of
    X(t) outside [-v_hi t, -v_lo t] (reported as a lower bound when no
    violations are seen).
    """
    from . import estimators  # local import to avoid a cycle

    params = default_params(p, gap_sites)
    xs = estimators.front_positions(params, pilot_t, replicas, master_seed)
    speeds = -xs / pilot_t
    v_emp = float(np.quantile(speeds, quantile))
    cap = 0.99 * params.gap_est / params.log_inv_pmin()
    v_lo = max(min(v_emp, cap), 1e-4)
    out = Params(p=p, v_lo=v_lo, v_hi=params.v_hi, gap_est=params.gap_est)
    viol = float(np.mean((speeds < v_lo) | (speeds > params.v_hi)))
    if viol > 0:
        out.gamma = -math.log(viol) / pilot_t
        out.calibration_note = f"pilot t={pilot_t}, R={replicas}; gamma from violations"
    else:
        out.gamma = -math.log(1.0 / (replicas + 1)) / pilot_t
        out.calibration_note = (
            f"pilot t={pilot_t}, R={replicas}; no violations, gamma is a lower bound"
        )
    return out
