"""Lattice configurations on a moving window, shifts, and zero bookkeeping.

A configuration is stored as a finite window of explicit cells plus two tail
policies: everything left of the window is occupied (that is what makes the
front well defined), and the right tail is one of all-ones, a frozen constant,
or lazily sampled Bernoulli(p).  Lazy sites are materialized from dedicated
per-coordinate substreams so that enlarging the window never resamples a site
that was observed before.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .streams import EventStream


class NoZeroError(Exception):
    """Configuration has no empty site reachable deterministically."""


class OutOfWindowError(Exception):
    pass


class ConstraintViolatedError(Exception):
    pass


# ---------------------------------------------------------------------------
# right-tail policies

@dataclass(frozen=True)
class AllOnes:
    def token(self) -> str:
        return "ones"


@dataclass(frozen=True)
class Frozen:
    bit: int

    def token(self) -> str:
        return f"frozen({self.bit})"


@dataclass(frozen=True)
class LazyBernoulli:
    p: float

    def token(self) -> str:
        return f"lazy({self.p:g})"


RightPolicy = AllOnes | Frozen | LazyBernoulli


def parse_policy(token: str) -> RightPolicy:
    token = token.strip()
    if token == "ones":
        return AllOnes()
    m = re.fullmatch(r"frozen\(([01])\)", token)
    if m:
        return Frozen(int(m.group(1)))
    m = re.fullmatch(r"lazy\(([0-9.eE+-]+)\)", token)
    if m:
        p = float(m.group(1))
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"lazy policy needs p in [0,1], got {p}")
        return LazyBernoulli(p)
    raise ValueError(f"unknown right-policy token {token!r}")


# ---------------------------------------------------------------------------
# configurations

@dataclass(frozen=True)
class Config:
    """Finite-window configuration; sites left of `origin` are occupied."""

    origin: int
    cells: tuple[int, ...]
    right_policy: RightPolicy = AllOnes()

    def __post_init__(self):
        if any(c not in (0, 1) for c in self.cells):
            raise ValueError("cells must be 0/1")

    @property
    def end(self) -> int:
        """One past the last explicit coordinate."""
        return self.origin + len(self.cells)

    def get(self, x: int, stream: EventStream | None = None) -> int:
        """Value at coordinate x, consulting tail policies outside the window."""
        if x < self.origin:
            return 1
        if x < self.end:
            return self.cells[x - self.origin]
        pol = self.right_policy
        if isinstance(pol, AllOnes):
            return 1
        if isinstance(pol, Frozen):
            return pol.bit
        if stream is None:
            raise OutOfWindowError(
                f"site {x} is beyond the window and the lazy tail needs a stream"
            )
        return stream.init_bit(x)

    def extended_to(self, x: int, stream: EventStream | None = None) -> "Config":
        """Window enlarged rightward so that x is explicit; values per policy."""
        if x < self.end:
            return self
        extra = [self.get(y, stream) for y in range(self.end, x + 1)]
        return replace(self, cells=self.cells + tuple(extra))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.cells, dtype=np.uint8)

    def serialize(self) -> str:
        bits = "".join(str(c) for c in self.cells)
        return f"{self.origin}:{bits}:{self.right_policy.token()}"

    @staticmethod
    def parse(text: str) -> "Config":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"expected origin:bits:policy, got {text!r}")
        origin = int(parts[0])
        if parts[1] and not re.fullmatch(r"[01]+", parts[1]):
            raise ValueError(f"bits field must be 0/1, got {parts[1]!r}")
        cells = tuple(int(c) for c in parts[1])
        return Config(origin, cells, parse_policy(parts[2]))


def front_position(config: Config) -> int:
    """Position of the front: min{x : omega_x = 0}.

    Raises NoZeroError when the window is fully occupied and the right tail
    cannot produce an empty site deterministically.
    """
    for i, c in enumerate(config.cells):
        if c == 0:
            return config.origin + i
    if isinstance(config.right_policy, Frozen) and config.right_policy.bit == 0:
        return config.end
    raise NoZeroError("no empty site in window and right tail is not deterministically empty")


def flip(config: Config, x: int) -> Config:
    """Configuration flipped at site x (an involution)."""
    if not (config.origin <= x < config.end):
        raise OutOfWindowError(f"site {x} outside window [{config.origin},{config.end})")
    i = x - config.origin
    cells = list(config.cells)
    cells[i] = 1 - cells[i]
    return replace(config, cells=tuple(cells))


@dataclass(frozen=True)
class FrontedConfig(Config):
    """Configuration normalized so the front sits at the origin 0."""

    def __post_init__(self):
        super().__post_init__()
        if self.origin != 0:
            raise ValueError("FrontedConfig must have origin 0")
        if not self.cells or self.cells[0] != 0:
            raise ValueError("FrontedConfig must be empty at site 0")


def shift_theta(config: Config, L: int = 0, stream: EventStream | None = None) -> FrontedConfig:
    """theta_L: re-center so site 0 is empty and site x>0 reads omega_{X+L+x}."""
    x_front = front_position(config)
    upper = config.end - (x_front + L + 1)
    cells = [0]
    for x in range(1, max(upper, 0) + 1):
        cells.append(config.get(x_front + L + x, stream))
    return FrontedConfig(0, tuple(cells), config.right_policy)


def shift_plus(fc: FrontedConfig) -> FrontedConfig:
    """Shift after a left jump of the front: content moves right by one."""
    cells = (0,) + fc.cells  # new site 1 is the old site 0, i.e. empty
    return FrontedConfig(0, cells, fc.right_policy)


def shift_minus(fc: FrontedConfig, stream: EventStream | None = None) -> FrontedConfig:
    """Shift after a right jump; requires site 1 empty."""
    if fc.get(1, stream) != 0:
        raise ConstraintViolatedError("shift_minus needs site 1 empty")
    cells = (0,) + fc.cells[2:]
    return FrontedConfig(0, cells, fc.right_policy)


# ---------------------------------------------------------------------------
# zero ladder

@dataclass(frozen=True)
class ZeroLadder:
    """Zeros Z_0 < Z_1 < ... spaced at least `spacing` apart, from the front.

    `positions` holds the finite entries; `truncated` means the next entry is
    +infinity (inf over an empty set).  Infinity is never encoded as a large
    integer.
    """

    spacing: float
    positions: tuple[int, ...]
    truncated: bool

    def gap(self, i: int) -> float:
        """Z_i - Z_{i-1}; +inf when Z_i is truncated."""
        if i < 1:
            raise IndexError("gap index starts at 1")
        if i < len(self.positions):
            return float(self.positions[i] - self.positions[i - 1])
        return math.inf


def zeros_spaced(
    config: Config,
    spacing: float,
    count: int,
    stream: EventStream | None = None,
    scan_limit: int = 100_000,
) -> ZeroLadder:
    """Ladder recursion Z_{i+1} = inf{x >= Z_i + spacing : omega_x = 0}.

    `spacing` may be fractional (the lattice recursion then starts at
    ceil(Z_i + spacing)).  Scanning a lazy tail is capped at `scan_limit`
    sites past the window before the ladder is declared truncated.
    """
    z0 = front_position(config)
    positions = [z0]
    hard_end = config.end + (scan_limit if isinstance(config.right_policy, LazyBernoulli) and stream else 0)
    while len(positions) < count + 1:
        lo = positions[-1] + spacing
        x = math.ceil(lo)
        if x <= positions[-1]:
            x = positions[-1] + 1
        found = None
        while x < hard_end:
            if x >= config.end:
                v = config.get(x, stream)
            elif x >= config.origin:
                v = config.cells[x - config.origin]
            else:
                v = 1
            if v == 0:
                found = x
                break
            x += 1
        if found is None:
            pol = config.right_policy
            if isinstance(pol, Frozen) and pol.bit == 0:
                positions.append(max(math.ceil(lo), config.end))
                continue
            if isinstance(pol, LazyBernoulli) and stream is None:
                raise OutOfWindowError("ladder scan hit a lazy tail with no stream")
            return ZeroLadder(spacing, tuple(positions), truncated=True)
        positions.append(found)
    return ZeroLadder(spacing, tuple(positions), truncated=False)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Params:
    """Model and calibration constants.

    p is the equilibrium density of occupied sites; q = 1 - p.  The ballistic
    constants v_lo < 1 < v_hi and the spectral-gap estimate drive the
    schedule arithmetic.  v_hi defaults to e^2, the smallest constant for
    which the finite-speed chain bound t^n/n! <= e^{-n} holds at n = v_hi t.
    v_lo and gamma have no closed form; defaults are conservative and both
    can be overridden or calibrated from pilot runs.
    """

    p: float
    v_lo: float | None = None
    v_hi: float = math.e ** 2
    gamma: float | None = None
    gap_est: float | None = None
    calibration_note: str = "defaults"

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"p must lie in [0,1], got {self.p}")

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def p_min(self) -> float:
        """p AND q minimum, the relaxation bookkeeping base."""
        return min(self.p, self.q)

    def log_inv_pmin(self) -> float:
        if self.p_min <= 0.0:
            return math.inf
        return math.log(1.0 / self.p_min)

    def require_schedule_constants(self) -> None:
        if self.gap_est is None or self.v_lo is None:
            raise ValueError("schedule needs gap_est and v_lo (set them or calibrate)")
        if not (0.0 < self.v_lo < 1.0 < self.v_hi):
            raise ValueError(f"need 0 < v_lo < 1 < v_hi, got {self.v_lo}, {self.v_hi}")
        # Remark on the choice of constants: v_lo must stay below
        # gap / ln(1/(p ^ q)) or the relaxation bookkeeping breaks down.
        if self.v_lo >= self.gap_est / self.log_inv_pmin():
            raise ValueError(
                f"v_lo={self.v_lo} violates v_lo < gap/ln(1/(p^q)) = "
                f"{self.gap_est / self.log_inv_pmin():.6g}"
            )

    def with_defaults(self, gap_est: float) -> "Params":
        """Fill gap_est and a compliant v_lo where missing."""
        out = Params(
            p=self.p,
            v_lo=self.v_lo,
            v_hi=self.v_hi,
            gamma=self.gamma,
            gap_est=self.gap_est if self.gap_est is not None else gap_est,
            calibration_note=self.calibration_note,
        )
        if out.v_lo is None:
            out.v_lo = 0.5 * out.gap_est / out.log_inv_pmin()
            out.calibration_note += "; v_lo=gap/(2 ln(1/p^q)) default"
        return out


def sample_mu_tilde(params: Params, window_size: int, stream: EventStream) -> FrontedConfig:
    """Sample the product measure with ones left of 0, a zero at 0, Bernoulli(p) right."""
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    cells = [0] + [stream.init_bit(x) for x in range(1, window_size + 1)]
    return FrontedConfig(0, tuple(cells), LazyBernoulli(params.p))


def single_zero_config(params: Params, window_size: int = 1) -> FrontedConfig:
    """The all-ones-then-zero configuration: one empty site at the origin."""
    cells = (0,) + (1,) * max(0, window_size - 1)
    return FrontedConfig(0, cells, Frozen(1))
