"""Bundled scenario catalog: one entry per acceptance check plus demos.

Each scenario is a named bundle of CLI arguments; `--check` mode runs the
scenario and exits 2 when its acceptance threshold is breached.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Scenario:
    name: str
    subcommand: str
    description: str
    args: dict = field(default_factory=dict)


CATALOG: list[Scenario] = [
    Scenario(
        "fig1-equilibrium", "simulate",
        "equilibrium raster at density p=1/2: space-time flip data on a finite chain",
        {"n": 150, "t": 40.0, "p": 0.5, "init": "equilibrium", "raster": True},
    ),
    Scenario(
        "front-demo", "simulate",
        "front trajectory demo from the single-zero configuration",
        {"t": 60.0, "p": 0.5, "init": "single-zero", "raster": True, "lo_mode": True},
    ),
    Scenario(
        "accept-01-oracle-gate", "exact",
        "kernel ensemble vs exact uniformization, N=6, p=0.5, t=2, 1e5 replicas",
        {"gate": True, "n": 6, "t": 2.0, "p": 0.5, "replicas": 100_000},
    ),
    Scenario(
        "accept-02-reversibility", "exact",
        "detailed-balance residual <= 1e-12 for N<=6, p in {0.3,0.5,0.7}",
        {"n_list": [1, 2, 3, 4, 5, 6], "p_list": [0.3, 0.5, 0.7], "residual_tol": 1e-12},
    ),
    Scenario(
        "accept-03-spectral", "exact",
        "gap(N=1)=1, gap>0 up to N=12, and the variance contraction at N=4",
        {"spectral_facts": True, "p": 0.5, "n_max": 12},
    ),
    Scenario(
        "accept-04-front-structure", "speed",
        "1e6 front jumps: all +-1 and left-jump rate = q within 3 sigma",
        {"p": 0.5, "t": 100.0, "replicas": 16_000, "jump_audit": True},
    ),
    Scenario(
        "accept-05-lln-speed", "speed",
        "LLN and speed identity at p in {0.3,0.5,0.7} plus the p=0 degenerate check",
        {"p_list": [0.3, 0.5, 0.7], "t": 2000.0, "replicas": 200,
         "sweep": [500.0, 1000.0, 2000.0], "degenerate_p0": True},
    ),
    Scenario(
        "accept-06-tv-profile", "tv-profile",
        "TV to Bernoulli(p)^w behind the front, decreasing in L with positive rate",
        {"p": 0.5, "t": 200.0, "w": 3, "L_list": [2, 4, 8, 16], "replicas": 100_000},
    ),
    Scenario(
        "accept-07-ergodicity", "nu",
        "two initial conditions give the same k=4 marginal behind the front at t=500",
        {"p": 0.5, "t": 500.0, "k": 4, "replicas": 10_000, "two_start": True},
    ),
    Scenario(
        "accept-08-dz-equilibrium", "dz-test",
        "product law left of the distinguished zero, z=3, W=6, t=2, 1e6 replicas",
        {"p": 0.5, "z": 3, "volume": 6, "t": 2.0, "replicas": 1_000_000},
    ),
    Scenario(
        "accept-09-voids", "voids",
        "P(no zero in the l-box behind the front) <= p^l + relaxation slack",
        {"p": 0.5, "t": 100.0, "l_list": [2, 4, 6], "replicas": 10_000},
    ),
    Scenario(
        "accept-10-martingale", "martingale",
        "front martingale mean zero on a grid; p=0 variance = t within 5%",
        {"p": 0.5, "t_grid": [10.0, 50.0, 200.0], "replicas": 10_000, "p0_var_check": True},
    ),
    Scenario(
        "accept-11-staged-coupling", "couple",
        "staged coupling success grows with the stage count N (5, 10, 20)",
        {"p": 0.5, "L0": 4, "stages_list": [5, 10, 20], "procedures": 300,
         "tc": 2.0, "tpc": 1.0, "t0": 3.0, "mode": "exact"},
    ),
    Scenario(
        "accept-12-finite-speed", "simulate",
        "clocks-only P(F(0, ceil(e^2 t), t)) <= e^{-ceil(e^2 t)} at t in {1,2}",
        {"probe_chain": True, "t_list": [1.0, 2.0], "replicas": 100_000},
    ),
]


def by_name(name: str) -> Scenario:
    for s in CATALOG:
        if s.name == name:
            return s
    raise KeyError(f"unknown scenario {name!r}")


def listing() -> str:
    width = max(len(s.name) for s in CATALOG)
    lines = [f"{s.name:<{width}}  [{s.subcommand}] {s.description}" for s in CATALOG]
    return "\n".join(lines)
