"""Experiment runner: scenario configs, seeds, reports, acceptance checks.

Exit codes: 0 success, 1 configuration or IO error, 2 acceptance-threshold
breach in --check mode.  Every run is deterministic given (scenario, seed);
the seed comes from --seed, the config file, or EASTLAB_SEED.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import coupling, estimators, exact, fastpath, front, kernel, scenarios, stats
from .core import Config, Params, sample_mu_tilde, single_zero_config
from .streams import EventStream, as_seed, replica_seed


class ConfigInvalidError(Exception):
    pass


# ---------------------------------------------------------------------------
# plumbing

def _write_json(outdir: Path, name: str, payload: dict) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    return path


def _write_csv(outdir: Path, name: str, header: list[str], rows: list) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{name}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _params(args) -> Params:
    p = float(args.p)
    return front.default_params(p, gap_sites=args.gap_sites)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("EASTLAB_SEED")
    if env:
        return int(env)
    if args.check:
        raise ConfigInvalidError("--check mode requires an explicit seed "
                                 "(--seed or EASTLAB_SEED)")
    return 0


def _load_config(args, parser_keys: set[str]) -> dict:
    if not args.config:
        return {}
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigInvalidError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalidError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalidError("config file must hold a JSON object")
    for key in raw:
        if key not in parser_keys:
            raise ConfigInvalidError(f"unknown config key {key!r}")
    return raw


def _parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x != ""]


def _parse_int_list(text) -> list[int]:
    return [int(x) for x in _parse_float_list(text)]


# ---------------------------------------------------------------------------
# subcommand handlers; each returns (exit_code, summary dict)

def cmd_exact(args, outdir: Path, seed: int) -> tuple[int, dict]:
    failures = []
    summary: dict = {"subcommand": "exact"}
    if args.gate:
        params = front.default_params(float(args.p), gap_sites=args.gap_sites)
        gate = estimators.oracle_gate(params, int(args.n), float(args.t),
                                      int(args.replicas), seed)
        summary["oracle_gate"] = gate
        if not gate["passed"]:
            failures.append("oracle gate TV above threshold")
    elif args.spectral_facts:
        p = float(args.p)
        gap1 = exact.spectral_gap(exact.build_generator(1, True, p))
        gaps = {}
        for n in range(1, int(args.n_max) + 1):
            gaps[n] = exact.spectral_gap(exact.build_generator(n, True, p))
        gen4 = exact.build_generator(4, True, p)
        f = np.zeros(gen4.dim)
        f[gen4.dim - 1] = 1.0
        f = f - gen4.mu() @ f
        contraction = []
        gap4 = gaps[4]
        var0 = exact.variance_under_mu(gen4, f)
        for t in (0.5, 1.0, 2.0):
            ptf = exact.evolve_function(gen4, f, t)
            lhs = exact.variance_under_mu(gen4, ptf)
            rhs = math.exp(-2.0 * t * gap4) * var0
            contraction.append({"t": t, "lhs": lhs, "rhs": rhs, "ok": bool(lhs <= rhs + 1e-12)})
        summary.update({
            "gap1": gap1,
            "gaps": gaps,
            "contraction": contraction,
        })
        if abs(gap1 - 1.0) > 1e-9:
            failures.append("gap(N=1) != 1")
        if any(g <= 0 for g in gaps.values()):
            failures.append("non-positive gap")
        if not all(c["ok"] for c in contraction):
            failures.append("variance contraction violated")
    else:
        n_list = _parse_int_list(args.n_list)
        p_list = _parse_float_list(args.p_list)
        rows = exact.exact_csv_rows(n_list, p_list)
        _write_csv(outdir, "exact", ["N", "p", "boundary", "gap", "residual", "runtime"],
                   [[r["N"], r["p"], r["boundary"], repr(r["gap"]), repr(r["residual"]),
                     f"{r['runtime']:.3f}"] for r in rows])
        summary["rows"] = rows
        tol = float(args.residual_tol)
        bad = [r for r in rows if r["residual"] > tol]
        if bad:
            failures.append(f"{len(bad)} residuals above {tol}")
        if any(r["gap"] <= 0 for r in rows):
            failures.append("non-positive gap")
        if any(r["N"] == 1 for r in rows):
            g1 = [r["gap"] for r in rows if r["N"] == 1]
            if any(abs(g - 1.0) > 1e-9 for g in g1):
                failures.append("gap(N=1) != 1")
    summary["failures"] = failures
    _write_json(outdir, "exact_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_speed(args, outdir: Path, seed: int) -> tuple[int, dict]:
    failures = []
    summary: dict = {"subcommand": "speed"}
    if args.jump_audit:
        params = _params(args)
        spec = estimators.FrontBatchSpec(p=params.p, t_end=float(args.t),
                                         grid=(float(args.t),))
        res = estimators.run_front_batch(spec, int(args.replicas), seed, args.jobs)
        total_jumps = int(res.jumps_left.sum() + res.jumps_right.sum())
        # every replica with ok==1 passed the in-driver +-1 audit
        rate_hat = res.jumps_left.sum() / (int(args.replicas) * float(args.t))
        se = math.sqrt(rate_hat / (int(args.replicas) * float(args.t)))
        summary["jump_audit"] = {
            "total_jumps": total_jumps,
            "left_rate_hat": float(rate_hat),
            "q": params.q,
            "three_sigma": 3.0 * se,
            "pm1_ok": bool((res.ok == 1).all()),
        }
        if total_jumps < 1_000_000:
            failures.append("fewer than 1e6 jumps observed")
        if abs(rate_hat - params.q) > 3.0 * se:
            failures.append("left-jump rate off q by more than 3 sigma")
        if not (res.ok == 1).all():
            failures.append("front jump invariant breached")
    else:
        p_list = _parse_float_list(args.p_list) if args.p_list else [float(args.p)]
        reports = []
        for i, p in enumerate(p_list):
            params = front.default_params(p, gap_sites=args.gap_sites)
            rep = estimators.front_speed(params, float(args.t), int(args.replicas),
                                         int(as_seed(seed)) + i, jobs=args.jobs,
                                         margin_factor=float(args.margin_factor))
            reports.append(rep)
            if rep.v_hat >= 0:
                failures.append(f"v_hat >= 0 at p={p}")
            if abs(rep.identity_residual) > rep.residual_ci:
                failures.append(f"speed identity residual breaks 3 sigma at p={p}")
            if args.sweep:
                sweep = estimators.speed_sweep(params, tuple(_parse_float_list(args.sweep)),
                                               int(args.replicas), int(as_seed(seed)) + 100 + i,
                                               jobs=args.jobs)
                summary[f"sweep_p{p}"] = sweep
                sds = sweep["sd"]
                if not all(sds[j + 1] < sds[j] for j in range(len(sds) - 1)):
                    failures.append(f"X(t)/t ensemble SD not shrinking at p={p}")
        _write_csv(outdir, "speed",
                   ["p", "t", "replicas", "v_hat", "v_ci", "rho0_hat", "rho0_ci",
                    "identity_residual", "residual_ci"],
                   [[r.p, r.t, r.replicas, repr(r.v_hat), repr(r.v_ci), repr(r.rho0_hat),
                     repr(r.rho0_ci), repr(r.identity_residual), repr(r.residual_ci)]
                    for r in reports])
        summary["reports"] = [r.to_json_dict() for r in reports]
        if args.degenerate_p0:
            params0 = Params(p=0.0, v_lo=0.9, gap_est=1.0)
            rep0 = estimators.front_speed(params0, 1000.0, 400, int(as_seed(seed)) + 7,
                                          jobs=args.jobs, margin_factor=0.002)
            summary["p0_check"] = {"v_hat": rep0.v_hat, "target": -1.0}
            if abs(rep0.v_hat + 1.0) > 0.01:
                failures.append("p=0 degenerate speed off -1 by more than 0.01")
    summary["failures"] = failures
    _write_json(outdir, "speed_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_tv_profile(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    rep = estimators.tv_behind_front(params, float(args.t), _parse_int_list(args.L_list),
                                     int(args.w), int(args.replicas), seed, jobs=args.jobs,
                                     margin_factor=float(args.margin_factor))
    failures = []
    if not rep.monotone_within_ci:
        failures.append("TV profile not non-increasing within CI")
    if rep.eps_hat is None:
        failures.append("decay fit impossible (all points at noise floor)")
    elif not (rep.eps_hat > 0 and rep.eps_lo > 0):
        failures.append("fitted decay rate not positive at 95%")
    _write_csv(outdir, "tv_profile", ["L", "tv", "sigma"],
               [[L, repr(tv), repr(sd)] for L, tv, sd in zip(rep.L_list, rep.tv, rep.tv_sigma)])
    summary = {"subcommand": "tv-profile", **rep.to_json_dict(), "failures": failures}
    _write_json(outdir, "tv_profile_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_nu(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    failures = []
    if args.two_start:
        rep = estimators.nu_two_start_compare(params, float(args.t), int(args.k),
                                              int(args.replicas), seed, jobs=args.jobs)
        summary = {"subcommand": "nu", **rep.to_json_dict()}
        if not rep.passed:
            failures.append("two-start TV above threshold")
    else:
        pmf, _ = estimators.nu_marginal(params, float(args.t), int(args.k),
                                        int(args.replicas), seed, jobs=args.jobs)
        _write_csv(outdir, "nu_marginal", ["code", "probability"],
                   [[i, repr(float(v))] for i, v in enumerate(pmf)])
        summary = {"subcommand": "nu", "k": int(args.k), "pmf": [float(v) for v in pmf]}
    summary["failures"] = failures
    _write_json(outdir, "nu_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_voids(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    rep = estimators.voids_behind_front(params, float(args.t), _parse_int_list(args.l_list),
                                        int(args.replicas), seed, jobs=args.jobs)
    failures = [] if rep.passed else ["void frequency above the plug-in bound"]
    _write_csv(outdir, "voids", ["l", "frequency", "bound"],
               [[l, repr(f), repr(b)] for l, f, b in zip(rep.l_list, rep.frequency, rep.bound)])
    summary = {"subcommand": "voids", **rep.to_json_dict(), "failures": failures}
    _write_json(outdir, "voids_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_martingale(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    rep = estimators.martingale_check(params, _parse_float_list(args.t_grid),
                                      int(args.replicas), seed, jobs=args.jobs)
    failures = []
    if not rep.mean_within_ci:
        failures.append("martingale mean outside 3 sigma")
    summary = {"subcommand": "martingale", **rep.to_json_dict()}
    if args.p0_var_check:
        params0 = Params(p=0.0, v_lo=0.9, gap_est=1.0)
        t_star = max(_parse_float_list(args.t_grid))
        rep0 = estimators.martingale_check(params0, [t_star], int(args.replicas),
                                           int(as_seed(seed)) + 5, jobs=args.jobs,
                                           margin_factor=0.002)
        ratio = rep0.var_M[0] / t_star
        summary["p0_var"] = {"t": t_star, "var": rep0.var_M[0], "ratio": ratio}
        if abs(ratio - 1.0) > 0.05:
            failures.append("p=0 martingale variance off t by more than 5%")
    summary["failures"] = failures
    _write_json(outdir, "martingale_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_dz_test(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    right = None
    if args.adversarial_right:
        right = tuple([1] * (int(args.volume) - int(args.z)))
    rep = estimators.dz_equilibrium_test(params, int(args.z), int(args.volume),
                                         float(args.t), int(args.replicas), seed,
                                         right_bits=right)
    failures = [] if rep.passed else ["a conditioning bin misses the product law"]
    _write_csv(outdir, "dz_test", ["xi", "samples", "tv", "threshold", "chi2_pvalue"],
               [[b.xi, b.samples, repr(b.tv), repr(b.threshold), repr(b.chi2_pvalue)]
                for b in rep.bins])
    summary = {"subcommand": "dz-test", **rep.to_json_dict(), "failures": failures}
    _write_json(outdir, "dz_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_couple(args, outdir: Path, seed: int) -> tuple[int, dict]:
    params = _params(args)
    stages_list = _parse_int_list(args.stages_list) if args.stages_list else [int(args.stages)]
    procedures = int(args.procedures)
    results = []
    dn_checked = dn_viol = 0
    for n_stages in stages_list:
        plan = coupling.StagePlan(L0=int(args.L0), n_stages=n_stages, t0=float(args.t0),
                                  tc=float(args.tc), tpc=float(args.tpc), v_hi=params.v_hi)
        succ = 0
        for proc in range(procedures):
            ms = int(replica_seed(as_seed(seed), (n_stages << 20) + proc))
            stream = EventStream(ms, params.p)
            omega = sample_mu_tilde(params, 12, stream)
            sigma = single_zero_config(params, 12)
            res = coupling.staged_coupling(omega, sigma, plan, params, ms,
                                           window_mode=args.mode,
                                           check_hypothesis=not args.skip_hypothesis)
            succ += int(res.success)
            dn_checked += res.dn_propagation_checked
            dn_viol += res.dn_propagation_violations
        rate = succ / procedures
        se = math.sqrt(max(rate * (1 - rate), 1e-9) / procedures)
        results.append({"N": n_stages, "success_rate": rate, "se": se})
    failures = []
    for a, b in zip(results, results[1:]):
        if not (b["success_rate"] + 3 * (a["se"] + b["se"]) >= a["success_rate"]):
            failures.append(f"success rate dropped from N={a['N']} to N={b['N']}")
    if len(results) >= 2 and not (results[-1]["success_rate"] > results[0]["success_rate"]):
        failures.append("success rate not increasing across the sweep")
    if dn_viol:
        failures.append("Dn-propagation assertion violated")
    summary = {
        "subcommand": "couple",
        "L0": int(args.L0),
        "mode": args.mode,
        "results": results,
        "dn_propagation": {"checked": dn_checked, "violations": dn_viol},
        "failures": failures,
    }
    _write_json(outdir, "couple_summary", summary)
    return (2 if failures and args.check else 0), summary


def cmd_simulate(args, outdir: Path, seed: int) -> tuple[int, dict]:
    failures = []
    summary: dict = {"subcommand": "simulate"}
    if args.probe_chain:
        rows = []
        for t in _parse_float_list(args.t_list):
            n = math.ceil(math.e**2 * t)
            hits = fastpath.chain_probe_batch(as_seed(seed), 0, int(args.replicas), 0, n, t)
            p_hat = float(hits.mean())
            bound = math.exp(-n)
            se = math.sqrt(max(p_hat * (1 - p_hat), 1.0 / len(hits)) / len(hits))
            rows.append({"t": t, "span": n, "p_hat": p_hat,
                         "p_hat_plus_3se": p_hat + 3 * se, "bound": bound})
            if p_hat + 3 * se > bound and p_hat > bound:
                failures.append(f"finite-speed bound violated at t={t}")
        summary["chain_probe"] = rows
    else:
        p = float(args.p)
        stream = EventStream(seed, p)
        if args.lo_mode:
            cfg = single_zero_config(Params(p)) if args.init == "single-zero" else \
                sample_mu_tilde(Params(p), 20, stream)
            state = kernel.SimState.infinite(cfg, stream, float(args.t),
                                             float(args.margin_factor))
        else:
            n = int(args.n)
            if args.init == "equilibrium":
                cells = tuple(stream.init_bit(x) for x in range(1, n + 1))
            else:
                cells = tuple([1] * (n // 2) + [0] + [1] * (n - n // 2 - 1))
            cfg = Config(1, cells)
            state = kernel.SimState(cfg, stream, kernel.FiniteVolume(1, n, 0))
        state.step_to(float(args.t))
        outdir.mkdir(parents=True, exist_ok=True)
        kernel.events_to_csv(state.log, outdir / "events.csv")
        if args.raster:
            rows = [[repr(e.time), e.site, e.new_value] for e in state.log if e.applied]
            _write_csv(outdir, "raster", ["time", "site", "new_value"], rows)
        summary["events"] = len(state.log)
        summary["window"] = list(state.window_bounds())
        if state.front is not None:
            summary["front"] = state.front
    summary["failures"] = failures
    _write_json(outdir, "simulate_summary", summary)
    return (2 if failures and args.check else 0), summary


HANDLERS = {
    "exact": cmd_exact,
    "speed": cmd_speed,
    "tv-profile": cmd_tv_profile,
    "nu": cmd_nu,
    "voids": cmd_voids,
    "martingale": cmd_martingale,
    "dz-test": cmd_dz_test,
    "couple": cmd_couple,
    "simulate": cmd_simulate,
}


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eastlab",
                                 description="East-model front dynamics laboratory")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--p", type=float, default=0.5)
        sp.add_argument("--t", type=float, default=100.0)
        sp.add_argument("--replicas", type=int, default=1000)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=None)
        sp.add_argument("--margin-factor", dest="margin_factor", type=float, default=3.0)
        sp.add_argument("--gap-sites", dest="gap_sites", type=int, default=12,
                        help="finite volume used for the default gap estimate")
        sp.add_argument("--check", action="store_true")
        sp.add_argument("--out", type=str, default="out")
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--scenario", type=str, default=None)

    sp = sub.add_parser("exact", help="finite-volume oracle: gap, residuals, gate")
    common(sp)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--n-list", dest="n_list", type=str, default="1,2,3,4,5,6")
    sp.add_argument("--p-list", dest="p_list", type=str, default="0.3,0.5,0.7")
    sp.add_argument("--residual-tol", dest="residual_tol", type=float, default=1e-12)
    sp.add_argument("--gate", action="store_true")
    sp.add_argument("--spectral-facts", dest="spectral_facts", action="store_true")
    sp.add_argument("--n-max", dest="n_max", type=int, default=12)

    sp = sub.add_parser("speed", help="front speed LLN and identity")
    common(sp)
    sp.add_argument("--p-list", dest="p_list", type=str, default=None)
    sp.add_argument("--sweep", type=str, default=None)
    sp.add_argument("--jump-audit", dest="jump_audit", action="store_true")
    sp.add_argument("--degenerate-p0", dest="degenerate_p0", action="store_true")

    sp = sub.add_parser("tv-profile", help="TV to equilibrium behind the front")
    common(sp)
    sp.add_argument("--w", type=int, default=3)
    sp.add_argument("--L-list", dest="L_list", type=str, default="2,4,8,16")

    sp = sub.add_parser("nu", help="invariant-measure marginal behind the front")
    common(sp)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--two-start", dest="two_start", action="store_true")

    sp = sub.add_parser("voids", help="no-zero boxes behind the front")
    common(sp)
    sp.add_argument("--l-list", dest="l_list", type=str, default="2,4,6")

    sp = sub.add_parser("martingale", help="front martingale decomposition")
    common(sp)
    sp.add_argument("--t-grid", dest="t_grid", type=str, default="10,50,200")
    sp.add_argument("--p0-var-check", dest="p0_var_check", action="store_true")

    sp = sub.add_parser("dz-test", help="distinguished-zero equilibrium test")
    common(sp)
    sp.add_argument("--z", type=int, default=3)
    sp.add_argument("--volume", type=int, default=6)
    sp.add_argument("--adversarial-right", dest="adversarial_right", action="store_true")

    sp = sub.add_parser("couple", help="staged coupling of two front processes")
    common(sp)
    sp.add_argument("--L0", type=int, default=4)
    sp.add_argument("--stages", type=int, default=10)
    sp.add_argument("--stages-list", dest="stages_list", type=str, default=None)
    sp.add_argument("--procedures", type=int, default=100)
    sp.add_argument("--t0", type=float, default=3.0)
    sp.add_argument("--tc", type=float, default=2.0)
    sp.add_argument("--tpc", type=float, default=1.0)
    sp.add_argument("--mode", type=str, default="exact", choices=["exact", "empirical"])
    sp.add_argument("--skip-hypothesis", dest="skip_hypothesis", action="store_true")

    sp = sub.add_parser("simulate", help="desk-scale runs, rasters, chain probes")
    common(sp)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--init", type=str, default="equilibrium",
                    choices=["equilibrium", "single-zero", "mu-tilde"])
    sp.add_argument("--raster", action="store_true")
    sp.add_argument("--lo-mode", dest="lo_mode", action="store_true")
    sp.add_argument("--probe-chain", dest="probe_chain", action="store_true")
    sp.add_argument("--t-list", dest="t_list", type=str, default="1,2")

    sub.add_parser("list-scenarios", help="print the bundled scenario catalog")
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.subcommand == "list-scenarios":
        print(scenarios.listing())
        return 0
    # precedence: explicit flag > config file > scenario bundle > default
    explicit = {tok[2:].split("=")[0].replace("-", "_")
                for tok in argv if tok.startswith("--")}
    try:
        merged: dict = {}
        if args.scenario:
            sc = scenarios.by_name(args.scenario)
            if sc.subcommand != args.subcommand:
                raise ConfigInvalidError(
                    f"scenario {sc.name} belongs to subcommand {sc.subcommand!r}")
            merged.update(sc.args)
        merged.update(_load_config(args, set(vars(args).keys())))
        for key, value in merged.items():
            if key not in vars(args):
                raise ConfigInvalidError(f"unknown config key {key!r}")
            if key not in explicit:
                setattr(args, key, value)
        seed = _resolve_seed(args)
        if args.jobs is not None:
            os.environ["EASTLAB_JOBS"] = str(args.jobs)
        outdir = Path(args.out)
        code, summary = HANDLERS[args.subcommand](args, outdir, seed)
    except ConfigInvalidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    for line in summary.get("failures", []):
        print(f"CHECK FAILED: {line}")
    if not summary.get("failures"):
        print(f"{args.subcommand}: ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
