"""Event-driven reference engine for the graphical construction.

One rate-1 Poisson clock per site, one Bernoulli(p) coin per *ring* (indexed
by the ring's sequence number at that site, used only when the ring is legal).
Per-ring coin attachment keeps two trajectories driven by the same streams in
lockstep even when their legality histories differ, which is exactly what the
standard coupling needs.

This engine is the readable, listener-friendly reference: a per-site next-ring
priority queue, exact activation semantics, full event logs.  The compiled
batch drivers in `fastpath` must reproduce its trajectories bit for bit (see
tests); they exist only because replica farms need ~1e10 events.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import Config, FrontedConfig, LazyBernoulli, AllOnes, Frozen, NoZeroError
from .streams import EventStream, exp_gap


class WindowExhaustedError(Exception):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    site: int
    coin: int
    legal: bool
    applied: bool
    new_value: int


@dataclass(frozen=True)
class InfiniteWindow:
    """LO-mode window policy: fixed right edge, left edge follows the front."""

    horizon: float
    margin_sites: int
    hard_cap: int | None = None


@dataclass(frozen=True)
class FiniteVolume:
    """Fixed sites [lo, hi] with an explicit boundary bit at hi+1."""

    lo: int
    hi: int
    boundary_bit: int


@dataclass(frozen=True)
class HalfLine:
    """Sites (-inf, hi] in LO mode with an explicit boundary bit at hi+1.

    This is the volume the bounded modified front runs in: the left edge
    follows the front as in the infinite window, the right border is pinned.
    """

    hi: int
    boundary_bit: int


def margin_for(horizon: float, margin_factor: float = 3.0, v_hi: float = math.e**2,
               minimum: int = 16) -> int:
    """Default right-margin width for infinite-volume runs."""
    return max(int(math.ceil(margin_factor * v_hi * horizon)), minimum)


def chain_crossing_log_bound(gap_sites: int, t: float) -> float:
    """log of the finite-speed bound P(ring chain spans `gap_sites` in time t).

    The chain needs gap_sites successive rings in increasing time order, and
    the expected number of such ordered chains is t^n / n!.
    """
    if gap_sites <= 0:
        return 0.0
    n = gap_sites
    return min(0.0, n * math.log(t) - math.lgamma(n + 1)) if t > 0 else -math.inf


class SimState:
    """A single East trajectory driven by an EventStream.

    Listeners are objects with an ``on_event(event, state)`` method; they are
    notified of every ring (legal or not) in time order and must treat the
    state as read-only.
    """

    def __init__(
        self,
        config: Config,
        stream: EventStream,
        mode: InfiniteWindow | FiniteVolume,
        now: float = 0.0,
        keep_log: bool = True,
    ):
        self.stream = stream
        self.mode = mode
        self.now = float(now)
        self.tainted = False
        self.listeners: list = []
        self.log: list[Event] = []
        self.keep_log = keep_log
        self.right_policy = config.right_policy

        self._bits: dict[int, int] = {}
        self._ring_k: dict[int, int] = {}
        self._pending: list[tuple[float, int]] = []
        self._active: set[int] = set()

        if isinstance(mode, FiniteVolume):
            if not (mode.lo <= config.origin and config.end - 1 <= mode.hi):
                raise ValueError("config window must fit inside the finite volume")
            self._lo, self._hi = mode.lo, mode.hi
            for x in range(mode.lo, mode.hi + 1):
                self._bits[x] = config.get(x, stream)
            self.front = None
            for x in range(mode.lo, mode.hi + 1):
                self._activate(x, self.now)
        elif isinstance(mode, HalfLine):
            x_front = core.front_position(config)
            self.front = x_front
            self._lo, self._hi = x_front - 1, mode.hi
            for x in range(x_front - 1, mode.hi + 1):
                self._bits[x] = config.get(x, stream) if x >= config.origin else 1
            for x in range(x_front - 1, mode.hi + 1):
                self._activate(x, self.now)
        else:
            x_front = core.front_position(config)
            for x in range(config.origin, x_front):
                if config.cells[x - config.origin] != 1:
                    raise ValueError("not in LO: empty site left of the front")
            self.front = x_front
            hi = max(x_front + mode.margin_sites, config.end - 1)
            self._lo, self._hi = x_front - 1, hi
            for x in range(x_front - 1, hi + 1):
                self._bits[x] = config.get(x, stream) if x >= config.origin else 1
            for x in range(x_front - 1, hi + 1):
                self._activate(x, self.now)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def infinite(cls, config: Config, stream: EventStream, horizon: float,
                 margin_factor: float = 3.0, now: float = 0.0, **kw) -> "SimState":
        mode = InfiniteWindow(horizon, margin_for(horizon, margin_factor))
        return cls(config, stream, mode, now=now, **kw)

    # -- site access ----------------------------------------------------------

    def value(self, x: int) -> int:
        if x in self._bits:
            return self._bits[x]
        if isinstance(self.mode, FiniteVolume):
            if x == self.mode.hi + 1:
                return self.mode.boundary_bit
            raise WindowExhaustedError(f"site {x} outside finite volume")
        if isinstance(self.mode, HalfLine):
            if x == self.mode.hi + 1:
                return self.mode.boundary_bit
            if x < self._lo:
                return 1
            raise WindowExhaustedError(f"site {x} beyond the half-line border")
        if x < self._lo:
            return 1
        # frozen right tail: time-zero value per policy, never updated
        pol = self.right_policy
        if isinstance(pol, AllOnes):
            return 1
        if isinstance(pol, Frozen):
            return pol.bit
        return self.stream.init_bit(x)

    def window_bounds(self) -> tuple[int, int]:
        return self._lo, self._hi

    def snapshot_config(self) -> Config:
        lo, hi = self.window_bounds()
        cells = tuple(self._bits[x] for x in range(lo, hi + 1))
        return Config(lo, cells, self.right_policy)

    # -- scheduling -----------------------------------------------------------

    def _activate(self, site: int, from_time: float) -> int:
        """Schedule a site's first ring after `from_time`; earlier rings of its
        stream are consumed unseen.  Returns how many were discarded."""
        if site in self._active:
            return 0
        key = self.stream.clock_key(site)
        t = 0.0
        k = 0
        while True:
            t += exp_gap(key, k)
            if t > from_time:
                break
            k += 1
        self._ring_k[site] = k
        heapq.heappush(self._pending, (t, site))
        self._active.add(site)
        return k

    def grow_window(self, direction: str, amount: int) -> int:
        """Manually enlarge the active window; returns discarded-ring count.

        Discarding is provably harmless for left growth (sites left of the
        front are occupied and constrained by occupied neighbours).  Growing
        right after time 0 discards rings that could have mattered, so the
        state is declared tainted.
        """
        if isinstance(self.mode, FiniteVolume):
            raise WindowExhaustedError("finite volume windows do not grow")
        if isinstance(self.mode, HalfLine) and direction == "right":
            raise WindowExhaustedError("half-line windows cannot grow right")
        if amount < 0:
            raise ValueError("amount must be >= 0")
        if amount == 0:
            return 0
        lo, hi = self._lo, self._hi
        discarded = 0
        if direction == "left":
            for x in range(lo - amount, lo):
                self._bits[x] = 1
                discarded += self._activate(x, self.now)
            self._lo = lo - amount
        elif direction == "right":
            if self.mode.hard_cap and hi + amount - lo > self.mode.hard_cap:
                raise WindowExhaustedError("window hard cap reached")
            for x in range(hi + 1, hi + amount + 1):
                self._bits[x] = self.value(x)
            self._hi = hi + amount
            for x in range(hi + 1, hi + amount + 1):
                discarded += self._activate(x, self.now)
            if self.now > 0.0 and discarded > 0:
                self.tainted = True
        else:
            raise ValueError("direction must be 'left' or 'right'")
        return discarded

    # -- dynamics -------------------------------------------------------------

    def add_listener(self, listener) -> None:
        self.listeners.append(listener)

    def step_to(self, t: float) -> list[Event]:
        """Execute all rings with time <= t in time order; returns them."""
        if t < self.now:
            raise ValueError("cannot step backwards")
        out: list[Event] = []
        pend = self._pending
        while pend and pend[0][0] <= t:
            tt, site = heapq.heappop(pend)
            k = self._ring_k[site]
            legal = self.value(site + 1) == 0
            coin = self.stream.coin(site, k)
            cur = self._bits[site]
            applied = False
            new_value = cur
            if legal:
                new_value = coin
                if new_value != cur:
                    self._bits[site] = new_value
                    applied = True
            self.now = tt
            ev = Event(tt, site, coin, legal, applied, new_value)
            out.append(ev)
            if self.keep_log:
                self.log.append(ev)
            if applied and self.front is not None:
                self._update_front(ev)
            for lis in self.listeners:
                lis.on_event(ev, self)
            # schedule the next ring of this site
            self._ring_k[site] = k + 1
            nxt = tt + exp_gap(self.stream.clock_key(site), k + 1)
            heapq.heappush(pend, (nxt, site))
        self.now = t
        return out

    def _update_front(self, ev: Event) -> None:
        if ev.site == self.front - 1 and ev.new_value == 0:
            self.front = ev.site
        elif ev.site == self.front and ev.new_value == 1:
            # the flip was legal, so site front+1 is empty: jump is exactly +1
            self.front = ev.site + 1
        elif ev.site < self.front:  # pragma: no cover
            raise AssertionError("applied flip below the front: kernel bug")
        # keep one live site left of the front
        if self.front - 1 not in self._active:
            self._bits.setdefault(self.front - 1, 1)
            self._lo = min(self._lo, self.front - 1)
            self._activate(self.front - 1, ev.time)


# ---------------------------------------------------------------------------
# replay and event-log plumbing

EVENT_DTYPE = np.dtype(
    [
        ("time", np.float64),
        ("site", np.int64),
        ("coin", np.uint8),
        ("legal", np.uint8),
        ("applied", np.uint8),
        ("new_value", np.uint8),
    ]
)


def events_to_array(events: list[Event]) -> np.ndarray:
    arr = np.empty(len(events), dtype=EVENT_DTYPE)
    for i, e in enumerate(events):
        arr[i] = (e.time, e.site, e.coin, e.legal, e.applied, e.new_value)
    return arr


def events_to_csv(events: list[Event], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "site", "coin", "legal", "applied", "new_value"])
        for e in events:
            w.writerow([repr(e.time), e.site, e.coin, int(e.legal), int(e.applied), e.new_value])


@dataclass
class ReplayScenario:
    """Everything needed to reproduce one desk-scale trajectory."""

    config_text: str
    p: float
    horizon: float
    finite_boundary: int | None = None  # None = infinite LO mode
    margin_factor: float = 3.0


def replay(master_seed: int, scenario: ReplayScenario) -> np.ndarray:
    """Run a scenario and return its full event log (bit-stable across runs)."""
    cfg = Config.parse(scenario.config_text)
    stream = EventStream(master_seed, scenario.p)
    if scenario.finite_boundary is None:
        state = SimState.infinite(cfg, stream, scenario.horizon, scenario.margin_factor)
    else:
        mode = FiniteVolume(cfg.origin, cfg.end - 1, scenario.finite_boundary)
        state = SimState(cfg, stream, mode)
    state.step_to(scenario.horizon)
    return events_to_array(state.log)
