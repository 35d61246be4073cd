"""Command line entry point.

Exit codes: 0 success or all checks passed, 1 a check failed, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, io
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .fluid import (FluidParams, InfeasibleBandError, drift_field, integrate_fluid,
                    simplex_directions, verify_lemma)
from .protocols import protocol_to_dict

log = logging.getLogger("sfmac")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _overrides(args) -> dict:
    over: dict = {}
    an = {}
    if getattr(args, "l0", None) is not None:
        an["lam0"] = args.l0
    if getattr(args, "l1", None) is not None:
        an["lam1"] = args.l1
    if getattr(args, "lam", None) is not None:
        an["lam"] = args.lam
    if an:
        over["analysis"] = an
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "horizon", None) is not None:
        run["horizon"] = args.horizon
    if getattr(args, "replications", None) is not None:
        run["replications"] = args.replications
    if run:
        over["run"] = run
    if getattr(args, "out", None) is not None:
        over["output"] = {"dir": args.out}
    return over


def _grid(spec) -> np.ndarray:
    lo, hi, num = spec
    return np.linspace(lo, hi, num)


def _fluid_params(cfg: ExperimentConfig, lam: float):
    spec = cfg.protocol()
    if spec.tag != "A1":
        raise ConfigError("fluid analysis applies to class A1 only")
    return FluidParams(lam, spec.beta, spec.C, spec.D)


def cmd_derive_params(cfg: ExperimentConfig, args) -> int:
    an = cfg.analysis
    d = cfg.derived()
    report = d.to_dict()
    report["chosen"] = {"C": d.C, "beta": d.beta, "D": d.D}
    io.write_json(cfg.output_dir / "derived_params.json", report)
    sys.stdout.write(io.dumps(report))
    log.info("derived constants for band (%g, %g)", an["lam0"], an["lam1"])
    return EXIT_OK


def cmd_verify_lemma(cfg: ExperimentConfig, args) -> int:
    an = cfg.analysis
    d = cfg.derived() if cfg.needs_derivation() else None
    spec = cfg.protocol(d)
    if spec.tag != "A1":
        raise ConfigError("verify-lemma applies to class A1 only")
    band = (an["lam0"], an["lam1"])
    lams = np.linspace(band[0], band[1], an["lemma_grid"]) if an["lemma_grid"] > 1 else [an["lam"]]
    reports = []
    t0 = time.perf_counter()
    for lam in lams:
        rep = verify_lemma(_fluid_params(cfg, float(lam)), band=band,
                           scan_points=an["scan_points"], residual_tol=an["residual_tol"])
        reports.append(rep)
    failed = sorted({f for r in reports for f in r.failures})
    out = {
        "protocol": protocol_to_dict(spec),
        "band": list(band),
        "passed": not failed,
        "failed_checks": failed,
        "seconds": time.perf_counter() - t0,
        "reports": [r.to_dict() for r in reports],
    }
    io.write_json(cfg.output_dir / "lemma_report.json", out)
    sys.stdout.write(io.dumps({k: out[k] for k in ("protocol", "band", "passed", "failed_checks")}))
    if failed:
        log.error("lemma checks failed: %s", ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _field(cfg: ExperimentConfig, params) -> Path:
    xs, ys = _grid(cfg.fluid["field_x"]), _grid(cfg.fluid["field_y"])
    try:
        table = drift_field(params, xs, ys)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return io.write_drift_field(cfg.output_dir / "drift_field.csv", table)


def cmd_drift_field(cfg: ExperimentConfig, args) -> int:
    path = _field(cfg, _fluid_params(cfg, cfg.analysis["lam"]))
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_fluid(cfg: ExperimentConfig, args) -> int:
    fl = cfg.fluid
    params = _fluid_params(cfg, cfg.analysis["lam"])
    dirs = simplex_directions(fl["directions"])
    if not dirs:
        raise ConfigError("fluid needs at least one starting direction")
    _field(cfg, params)
    rows = []
    for i, (x0, y0) in enumerate(dirs):
        traj = integrate_fluid(x0, y0, params, dt=fl["dt"], T=fl["T"], eps_stop=fl["eps_stop"],
                               record_every=fl["record_every"])
        io.write_trajectory(cfg.output_dir / "fluid" / f"trajectory_{i:03d}.csv", traj)
        rows.append({"x0": x0, "y0": y0, "status": traj.status, "t_end": traj.t_end,
                     "t_eps": traj.t_eps, "x_end": float(traj.x[-1]), "y_end": float(traj.y[-1])})
    ok = all(r["status"] == "converged" for r in rows)
    summary = {"params": params, "all_converged": ok, "trajectories": rows}
    io.write_json(cfg.output_dir / "fluid_summary.json", summary)
    sys.stdout.write(io.dumps({"params": params, "all_converged": ok}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    spec = cfg.protocol()
    proc = cfg.arrivals()
    run_cfg = cfg.run_config()
    traces, verdict = harness.simulate(spec, proc, run_cfg, jobs=args.jobs)
    out = cfg.output_dir
    if not all(t.summary.conserved for t in traces):
        log.error("message conservation violated")
        return EXIT_FAIL
    io.write_summaries(out / "summaries.csv", traces)
    if cfg.raw["run"]["write_traces"]:
        for i, tr in enumerate(traces):
            io.write_trace(out / "traces" / f"trace_{i:03d}.csv", tr)
    result = harness.SweepResult({"lam": [proc.lam_effective]},
                                 [harness.SweepCell(0, {"lam": proc.lam_effective}, verdict)])
    io.write_sweep(out / "verdict.csv", result)
    report = {"protocol": protocol_to_dict(spec), "arrivals": cfg.raw["arrivals"],
              "run": cfg.raw["run"], "verdict": verdict.to_dict()}
    io.write_json(out / "verdict.json", report)
    sys.stdout.write(f"{verdict.verdict} slope={verdict.slope:.6g} "
                     f"throughput={verdict.throughput:.6g}\n")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    spec = cfg.protocol()
    axes = cfg.raw["sweep"]["axes"]
    try:
        result = harness.sweep(axes, spec, cfg.arrivals(), cfg.run_config(), jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = cfg.output_dir
    io.write_sweep(out / "sweep.csv", result)
    io.write_json(out / "sweep.json", {
        "protocol": protocol_to_dict(spec), "run": cfg.raw["run"], "axes": axes,
        "cells": [{"values": c.values, "verdict": c.verdict, "error": c.error}
                  for c in result.cells],
    })
    for row in result.rows():
        vals = " ".join(f"{k}={row[k]}" for k in axes)
        sys.stdout.write(f"{vals} {row['verdict']}\n")
    return EXIT_OK


def cmd_explore(cfg: ExperimentConfig, args) -> int:
    ex = cfg.raw["explore"]
    try:
        results = harness.explore_conjectures(
            ex["family"], cfg.explore_selections(), ex["lambdas"], cfg.arrivals(),
            cfg.run_config(), C=ex["C"], beta=ex["beta"], S_init=ex["S_init"], jobs=args.jobs)
    except harness.ClassValidationError as exc:
        log.error("%s", exc)
        io.write_json(cfg.output_dir / "explore_rejected.json",
                      {"error": str(exc), "reports": exc.reports})
        return EXIT_USAGE
    out = cfg.output_dir
    entries = []
    for i, res in enumerate(results):
        io.write_sweep(out / f"explore_{i:02d}.csv", res.result)
        entries.append({"family": res.family, "h": res.h.label(),
                        "eps": res.eps.label() if res.eps else None, "label": res.label,
                        "validators": res.reports,
                        "cells": [{"values": c.values, "verdict": c.verdict, "error": c.error}
                                  for c in res.result.cells]})
        for row in res.result.rows():
            sys.stdout.write(f"{res.result.label} lam={row['lam']} {row['verdict']} "
                             f"[{res.label}]\n")
    io.write_json(out / "explore.json", {"run": cfg.raw["run"], "results": entries})
    return EXIT_OK


def cmd_print_default_config(cfg, args) -> int:
    sys.stdout.write(json.dumps(default_config(), indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "derive-params": cmd_derive_params,
    "verify-lemma": cmd_verify_lemma,
    "fluid": cmd_fluid,
    "drift-field": cmd_drift_field,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "explore": cmd_explore,
    "print-default-config": cmd_print_default_config,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _jobs(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=_u64, help="base seed (overrides run.seed)")
    common.add_argument("--jobs", type=_jobs, default=1, help="worker processes")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--l0", type=float, help="lower end of the rate band")
    common.add_argument("--l1", type=float, help="upper end of the rate band")
    common.add_argument("--lam", type=float, help="input rate (fluid analysis and rate-based arrivals)")
    common.add_argument("--horizon", type=int, help="slots per replication")
    common.add_argument("--replications", type=int, help="replications per cell")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="sfmac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "print-default-config":
        return cmd_print_default_config(None, args)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.lam is not None and "rate" in cfg.raw["arrivals"]:
            # --lam also drives the simulated arrival rate
            cfg.raw["arrivals"]["rate"] = args.lam
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InfeasibleBandError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
