"""Command-line front end: ``disjqp simulate | assimilate | verify``.

Exit codes: 0 success, 1 solver failure, 2 configuration error,
3 verification failure. ``DISJQP_OUTPUT_DIR`` replaces the default output
directory when ``--output-dir`` is not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .assimilation import (ExperimentConfig, build_experiment_inputs,
                           run_twin_experiment, write_experiment)
from .errors import DisjointQPError, ModelBlowUpError
from .kkt_active_set import Alg1Settings, find_feasible_start, solve_alg1
from .nullspace_pcg import Alg2Settings, solve_alg2
from .oracle import enumerate_solve, projected_gradient_solve, random_qp
from .qp_core import Point, evaluate_objective, save_qp
from .shallow_water import (ModelConfig, rain_source, random_initial_state, rest_state,
                            run, step, write_trajectory)

logger = logging.getLogger("disjqp")

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3

OUTPUT_ENV = "DISJQP_OUTPUT_DIR"


class ConfigError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    # repr of a float is the shortest string that reads back to the same
    # double, so equal runs give byte-identical files
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _output_dir(args) -> Path:
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or "disjqp-output"
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _model_config(args) -> ModelConfig:
    data = _load_json(args.config).get("model", {}) if args.config else {}
    try:
        return ModelConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _run_manifest(args, outdir: Path, extra=None) -> None:
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"command": args.command, "arguments": argv, "version": __version__}
    if extra:
        manifest.update(extra)
    _dump_json(manifest, outdir / "run.json")


# simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _model_config(args)
    if args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    if args.members < 1:
        raise ConfigError("--members must be >= 1")
    outdir = _output_dir(args)
    children = np.random.SeedSequence(args.seed).spawn(args.members)
    for k, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        if args.rest:
            init = rest_state(cfg)
        else:
            init = random_initial_state(cfg, rng, bumps=args.bumps,
                                        u_amplitude=args.u_amplitude,
                                        h_amplitude=args.h_amplitude)
        traj = run(init, args.steps, cfg, rng, args.sample_every)
        write_trajectory(traj, cfg, outdir / f"member_{k:03d}", args.seed, args.steps)
        logger.info("member %d: max r %.3e", k, float(traj[-1].r.max()))
    _run_manifest(args, outdir, {"model": cfg.to_dict()})
    print(f"wrote {args.members} trajectory(ies) to {outdir}")
    return EXIT_OK


# assimilate ---------------------------------------------------------------

def _experiment_config(args) -> ExperimentConfig:
    data = _load_json(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "ensemble_size": args.ensemble_size,
        "lead_steps": args.lead_steps,
        "localization_cutoff": args.cutoff,
        "taper": args.taper,
        "rain_threshold": args.rain_threshold,
        "extra_u_basis": args.extra_u_basis,
        "workers": args.workers,
    }
    for key, val in overrides.items():
        if val is not None:
            data[key] = val
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_assimilate(args) -> int:
    cfg = _experiment_config(args)
    if args.cg_cap is not None and args.cg_cap < 1:
        raise ConfigError("--cg-cap must be >= 1")
    try:
        alg1 = Alg1Settings(epsilon=args.epsilon, max_outer=args.max_outer or 50)
        alg2 = Alg2Settings(epsilon=args.epsilon, max_outer=args.max_outer or 200,
                            max_cg_per_outer=args.cg_cap,
                            stop_on_single_face=args.stop_on_single_face)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    outdir = _output_dir(args)
    t0 = time.perf_counter()
    inputs = build_experiment_inputs(cfg)

    solver = "unconstrained" if args.solver == "oracle" else args.solver
    exp = run_twin_experiment(cfg, solver, alg1, alg2, inputs=inputs,
                              raise_on_failure=False)
    status = EXIT_OK
    extra = {}
    if args.solver == "alg2" and exp.trace is not None:
        # the trace reports each iterate's distance to the active-set solution
        ref = run_twin_experiment(cfg, "alg1", Alg1Settings(epsilon=args.epsilon),
                                  inputs=inputs, raise_on_failure=False)
        if ref.constrained is not None:
            exp.trace.set_reference(ref.constrained.stacked())
    if args.solver == "oracle":
        qp = exp.qp
        zp = exp.prior.stacked()
        start = Point(zp[:qp.n].copy(), np.maximum(zp[qp.n:], 0.0))
        try:
            pt = projected_gradient_solve(qp, start, tol=args.epsilon,
                                          max_iters=args.oracle_iters)
            extra["oracle_objective"] = evaluate_objective(qp, pt)
            np.savetxt(outdir / "oracle_solution.csv", pt.z, fmt="%.17g")
        except DisjointQPError as exc:
            exp.error = str(exc)

    write_experiment(exp, outdir)
    if exp.trace is not None:
        exp.trace.to_csv(outdir / "trace.csv")
        exp.trace.to_json(outdir / "trace.json")
    if args.export_qp:
        save_qp(exp.qp, outdir / "qp")
    _run_manifest(args, outdir, extra)

    if exp.error is not None:
        print(f"solver failure: {exp.error}", file=sys.stderr)
        status = EXIT_SOLVER
    summary = {"solver": args.solver, "negative_rain_unconstrained": exp.negative_rain_count,
               "rmse_unconstrained": exp.rmse_unconstrained}
    if exp.trace is not None:
        summary.update(status=exp.trace.status, iterations=exp.trace.iterations)
    if exp.rmse_constrained is not None:
        summary["rmse_constrained"] = exp.rmse_constrained
    print(json.dumps(summary, sort_keys=True))
    logger.info("assimilate finished in %.1f s", time.perf_counter() - t0)
    return status


# verify -------------------------------------------------------------------

def _check(report, name, ok, detail):
    report.append({"property": name, "passed": bool(ok), "detail": detail})
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def _oracle_battery(n_instances: int):
    worst_z = worst_j = worst_pg = 0.0
    failures = 0
    for seed in range(n_instances):
        qp = random_qp(seed)
        ref = enumerate_solve(qp)
        z_ref = ref.point.z
        scale = 1.0 + np.linalg.norm(z_ref)
        start = find_feasible_start(qp)
        try:
            p1, _ = solve_alg1(qp, start)
            p2, _ = solve_alg2(qp, start)
        except DisjointQPError:
            failures += 1
            continue
        for pt in (p1, p2):
            worst_z = max(worst_z, np.linalg.norm(pt.z - z_ref) / scale)
            worst_j = max(worst_j, abs(evaluate_objective(qp, pt) - ref.objective)
                          / (1.0 + abs(ref.objective)))
        pg = projected_gradient_solve(qp, start)
        worst_pg = max(worst_pg, np.linalg.norm(pg.z - z_ref) / scale)
    return failures, worst_z, worst_j, worst_pg


def cmd_verify(args) -> int:
    outdir = _output_dir(args)
    report = []
    n_inst = 10 if args.quick else args.instances
    failures, wz, wj, wpg = _oracle_battery(n_inst)
    _check(report, "solvers converge", failures == 0, f"{failures} failures in {n_inst}")
    _check(report, "alg1/alg2 match enumeration in z", wz <= 1e-6, f"worst {wz:.3e}")
    _check(report, "alg1/alg2 match enumeration in J", wj <= 1e-9, f"worst {wj:.3e}")
    _check(report, "projected gradient matches enumeration", wpg <= 1e-6, f"worst {wpg:.3e}")

    cfg = ModelConfig()
    src_on = float(rain_source(np.array(-0.003), np.array(cfg.h_r + 0.1), cfg))
    src_off = float(rain_source(np.array(0.003), np.array(cfg.h_r + 0.1), cfg))
    _check(report, "convergence above h_r produces rain", src_on > 0 and src_off == 0,
           f"source {src_on:.3e} (convergent), {src_off:.3e} (divergent)")

    rest = rest_state(cfg)
    moved = step(rest, cfg)
    diff = max(np.abs(moved.u).max(), np.abs(moved.h - cfg.h0).max(), np.abs(moved.r).max())
    _check(report, "rest state is a fixed point", diff == 0.0, f"max change {diff:.3e}")

    steps = 200 if args.quick else 1000
    rng = np.random.default_rng(args.seed)
    state = random_initial_state(cfg, rng)
    m0 = float(state.h.sum())
    min_r = 0.0
    try:
        for k in range(steps):
            state = step(state, cfg, rng, k)
            min_r = min(min_r, float(state.r.min()))
        drift = abs(float(state.h.sum()) - m0) / m0
    except ModelBlowUpError as exc:
        drift = np.inf
        logger.error("%s", exc)
    _check(report, "height sum conserved", drift <= 1e-10, f"relative drift {drift:.3e} over {steps} steps")
    _check(report, "rain stays non-negative", min_r >= 0.0, f"min r {min_r:.3e}")

    ok = all(r["passed"] for r in report)
    _dump_json({"passed": ok, "instances": n_inst, "checks": report}, outdir / "verify.json")
    return EXIT_OK if ok else EXIT_VERIFY


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disjqp", description="Disjoint-constraint QP solvers and the shallow-water twin experiment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--output-dir", "-o", default=None,
                       help=f"output directory (default: ${OUTPUT_ENV} or ./disjqp-output)")
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="run the shallow-water model and write trajectories")
    common(p)
    p.add_argument("--steps", type=int, default=60)
    p.add_argument("--members", type=int, default=1, help="number of independent initial conditions")
    p.add_argument("--sample-every", type=int, default=None)
    p.add_argument("--rest", action="store_true", help="start from the resting state")
    p.add_argument("--bumps", type=int, default=25)
    p.add_argument("--u-amplitude", type=float, default=0.5)
    p.add_argument("--h-amplitude", type=float, default=0.5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("assimilate", help="run the twin experiment and write solver tables")
    common(p)
    p.add_argument("--solver", default="alg1", choices=["alg1", "alg2", "oracle", "unconstrained"])
    p.add_argument("--cg-cap", type=int, default=None, help="CG iterations per outer iteration (alg2)")
    p.add_argument("--stop-on-single-face", action="store_true",
                   help="alg2: stop after an outer iteration that explored one face")
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--max-outer", type=int, default=None)
    p.add_argument("--ensemble-size", type=int, default=None)
    p.add_argument("--lead-steps", type=int, default=None)
    p.add_argument("--cutoff", type=int, default=None, help="localization cutoff in grid points")
    p.add_argument("--taper", choices=["hard", "gaspari-cohn"], default=None)
    p.add_argument("--rain-threshold", type=float, default=None)
    p.add_argument("--extra-u-basis", choices=["rain", "domain"], default=None)
    p.add_argument("--workers", type=int, default=None, help="threads for ensemble generation")
    p.add_argument("--oracle-iters", type=int, default=200_000)
    p.add_argument("--export-qp", action="store_true", help="also write the QP in Matrix Market form")
    p.set_defaults(func=cmd_assimilate)

    p = sub.add_parser("verify", help="run the oracle battery and model invariant checks")
    common(p)
    p.add_argument("--quick", action="store_true", help="10 instances and a short model run")
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelBlowUpError as exc:
        print(f"model failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DisjointQPError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
