"""Batch front-end: generate or load an instance, solve, write artifacts.

Outputs per run: an iteration CSV (stride-sampled), a JSON report row in
the shape of the experiment tables (m, N, L, nig, obj0, cpu, obj, const),
and the final material states (last iterate and weighted average) in the
state file format.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import diagnostics, fem2d, penalty, saddle
from .model import FmoError, InvalidInstance, NumericalFailure, ProblemInstance

CSV_HEADER = (
    "t,objective,gap_estimate,theoretical_bound,violation_literal,"
    "violation_positive,sigma,alpha,wall_ns,flops"
)


@dataclass
class RunConfig:
    """Everything one batch run needs besides the instance itself."""

    mode: str = "plain"
    scheme: str = "simple"
    iterations: int = 1000
    tau: float | None = 0.5
    sigma0: float | None = 1.0
    autotune_window: int = 0
    eta: float | None = None
    nu: float | None = None
    seed: int = 0
    stride: int = 1
    deterministic: bool = False
    dense_threshold: int = 4000
    out_prefix: str = "fmopt_run"

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInstance("need iterations >= 1")
        if self.stride < 1:
            raise InvalidInstance("need stride >= 1")


def _csv_cell(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run(config: RunConfig, instance: ProblemInstance, out_prefix: str | None = None) -> dict:
    """Solve one instance and write CSV/report/state artifacts.

    Returns the report dictionary.  Violation columns are filled from the
    dense compliance solve at logged rows (penalty mode already has them);
    above the dense threshold they are recorded as NaN.
    """
    prefix = out_prefix or config.out_prefix
    if config.eta is not None or config.nu is not None:
        instance = ProblemInstance(
            instance.elements,
            instance.loads,
            instance.rho_l,
            instance.rho_u,
            instance.r,
            instance.gamma,
            instance.eta if config.eta is None else config.eta,
            instance.nu if config.nu is None else config.nu,
        )

    tau, sigma0 = config.tau, config.sigma0
    constants = None
    if tau is None or sigma0 is None:
        auto_tau, auto_sigma, constants = diagnostics.optimal_parameters(
            instance, config.scheme
        )
        tau = auto_tau if tau is None else tau
        sigma0 = auto_sigma if sigma0 is None else sigma0
    if constants is None:
        try:
            constants = diagnostics.compute_constants(instance, tau)
        except FmoError:
            constants = None  # bound column stays empty on huge instances

    solver_config = saddle.SolverConfig(
        scheme=config.scheme,
        mode=config.mode,
        iterations=config.iterations,
        tau=tau,
        sigma0=sigma0,
        autotune_window=config.autotune_window,
        log_stride=config.stride,
        dense_threshold=config.dense_threshold,
        deterministic=config.deterministic,
        seed=config.seed,
    )

    dense_ok = instance.N <= config.dense_threshold
    csv_path = f"{prefix}.csv"
    best_feasible_obj = None

    with open(csv_path, "w") as csv_file:
        csv_file.write(CSV_HEADER + "\n")

        def sink(rec: saddle.IterationRecord):
            nonlocal best_feasible_obj
            lit, pos = rec.violation_literal, rec.violation_positive
            if lit is None and dense_ok and config.mode == "plain":
                comp = penalty.compliances_from_dense(
                    instance, penalty.assemble_dense(instance, rec.E_ref)
                )
                lit, pos = penalty.violation_sums(instance, comp)
            if pos is not None and rec.feasible and pos <= 0.0:
                obj = rec.objective
                if best_feasible_obj is None or obj < best_feasible_obj:
                    best_feasible_obj = obj
            row = [
                rec.t,
                rec.objective,
                rec.gap,
                rec.theoretical_bound,
                lit,
                pos,
                rec.sigma,
                rec.alpha,
                rec.wall_ns,
                rec.flops,
            ]
            csv_file.write(",".join(_csv_cell(v) for v in row) + "\n")

        t0 = time.perf_counter()
        result = saddle.run_solver(instance, solver_config, sink, constants)
        cpu = time.perf_counter() - t0

    state_path = f"{prefix}_state.txt"
    avg_path = f"{prefix}_state_avg.txt"
    fem2d.write_state(result.E_last, state_path)
    fem2d.write_state(result.E_avg, avg_path)

    final_literal = final_positive = None
    feasible_flag = None
    certificate = None
    if dense_ok:
        comp = penalty.compliances_from_dense(
            instance, penalty.assemble_dense(instance, result.E_last.dense())
        )
        final_literal, final_positive = penalty.violation_sums(instance, comp)
        from .model import feasible_E

        in_Q, _ = feasible_E(instance, result.E_last)
        feasible_flag = bool(in_Q and final_positive <= 1e-9 * max(1.0, instance.gamma))
        f_star_upper = best_feasible_obj
        if f_star_upper is None:
            f_star_upper = float(np.sum(instance.rho_u))  # always an upper bound
        cert = diagnostics.approximation_certificate(
            instance, result.E_avg, result.x_avg.vectors, f_star_upper,
            dense_threshold=config.dense_threshold,
        )
        certificate = {
            "f_star_upper_estimate": f_star_upper,
            "all_dual_strictly_inside": cert.all_strictly_inside,
            "violated_loads": cert.violated.tolist(),
            "lhs_root_violation": cert.lhs_root_violation,
            "rhs_plain": cert.rhs_plain,
            "rhs_penalized": cert.rhs_penalized,
            "bound_satisfied": cert.bound_satisfied,
        }

    report = {
        "m": instance.m,
        "N": instance.N,
        "L": instance.L,
        "nig": instance.nig,
        "obj0": float(np.sum(instance.rho_u)),
        "cpu": cpu,
        "obj": result.E_avg.objective(),
        "obj_last": result.E_last.objective(),
        # published tables show the violation with the sign of min(gamma - c, 0)
        "const": "f" if feasible_flag else (None if final_positive is None else -final_positive),
        "feasible": feasible_flag,
        "violation_literal": final_literal,
        "violation_positive": final_positive,
        "scheme": config.scheme,
        "mode": config.mode,
        "iterations": config.iterations,
        "seed": config.seed,
        "tau": tau,
        "sigma0": sigma0,
        "sigma_final": result.sigma_final,
        "fallback_events": result.fallback_events,
        "best_feasible_obj": best_feasible_obj,
        "certificate": certificate,
        "flops": result.counter.total,
        "csv": csv_path,
        "state": state_path,
        "state_avg": avg_path,
    }
    with open(f"{prefix}_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fmopt",
        description="First-order saddle-point solver for minimum-cost material design",
    )
    src = p.add_argument_group("problem source")
    src.add_argument("--instance", help="path to an fmo-inst/1 file")
    src.add_argument("--mesh", help="generate instead: NXxNY element grid, e.g. 8x4")
    src.add_argument("--lx", type=float, default=None, help="domain width (default nx)")
    src.add_argument("--ly", type=float, default=None, help="domain height (default ny)")
    src.add_argument("--fixed-edge", default="left", choices=list(fem2d.EDGES))
    src.add_argument(
        "--load",
        action="append",
        default=None,
        metavar="SEL:FX,FY",
        help="load case, e.g. right_edge:0,-1 (repeatable)",
    )
    src.add_argument("--rho-l", type=float, default=0.3)
    src.add_argument("--rho-u", type=float, default=3.0)
    src.add_argument("--r", type=float, default=0.05)
    src.add_argument("--gamma", type=float, default=None, help="compliance cap (default: 2x initial)")
    src.add_argument("--save-instance", help="write the generated instance here")

    rung = p.add_argument_group("run")
    rung.add_argument("--mode", default="plain", choices=["plain", "penalty"])
    rung.add_argument("--scheme", default="simple", choices=["simple", "weighted"])
    rung.add_argument("--iters", type=int, default=1000)
    rung.add_argument("--tau", default="0.5", help="float or 'auto'")
    rung.add_argument("--sigma0", default="1.0", help="float or 'auto'")
    rung.add_argument("--autotune-window", type=int, default=0)
    rung.add_argument("--eta", type=float, default=None, help="override the instance eta")
    rung.add_argument("--nu", type=float, default=None, help="override the instance nu")
    rung.add_argument("--seed", type=int, default=0)
    rung.add_argument("--stride", type=int, default=1)
    rung.add_argument("--deterministic", action="store_true")
    rung.add_argument("--dense-threshold", type=int, default=4000)
    rung.add_argument("--out", default="fmopt_run", help="output path prefix")
    return p


def _parse_loads(tokens):
    loads = []
    for tok in tokens:
        sel, _, comps = tok.partition(":")
        fx, fy = (float(v) for v in comps.split(","))
        loads.append(fem2d.LoadSpec(sel, (fx, fy)))
    return tuple(loads)


def _instance_from_args(args) -> ProblemInstance:
    if args.instance:
        inst = fem2d.read_instance(args.instance)
        return inst
    if not args.mesh:
        raise InvalidInstance("provide --instance or --mesh")
    nx, _, ny = args.mesh.partition("x")
    nx, ny = int(nx), int(ny)
    loads = _parse_loads(args.load) if args.load else (fem2d.LoadSpec("right_edge", (0.0, -1.0)),)
    spec = fem2d.MeshSpec(
        nx=nx,
        ny=ny,
        lx=args.lx if args.lx is not None else float(nx),
        ly=args.ly if args.ly is not None else float(ny),
        fixed_edge=args.fixed_edge,
        loads=loads,
    )
    gamma = args.gamma
    eta = args.eta if args.eta is not None else 10.0
    nu = args.nu if args.nu is not None else 0.0
    if gamma is None:
        probe = fem2d.build_instance(spec, args.rho_l, args.rho_u, args.r, 1.0, eta, nu)
        comp = fem2d.reference_compliance(probe, probe.start_material())
        gamma = 2.0 * float(np.max(comp))
    inst = fem2d.build_instance(spec, args.rho_l, args.rho_u, args.r, gamma, eta, nu)
    if args.save_instance:
        fem2d.write_instance(inst, args.save_instance)
    return inst


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        instance = _instance_from_args(args)
        config = RunConfig(
            mode=args.mode,
            scheme=args.scheme,
            iterations=args.iters,
            tau=None if args.tau == "auto" else float(args.tau),
            sigma0=None if args.sigma0 == "auto" else float(args.sigma0),
            autotune_window=args.autotune_window,
            eta=args.eta,
            nu=args.nu,
            seed=args.seed,
            stride=args.stride,
            deterministic=args.deterministic,
            dense_threshold=args.dense_threshold,
            out_prefix=args.out,
        )
        report = run(config, instance)
    except (InvalidInstance, FileNotFoundError, ValueError) as exc:
        json.dump({"error": str(exc), "kind": "input"}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except (NumericalFailure, FmoError) as exc:
        json.dump({"error": str(exc), "kind": "numerical"}, sys.stderr)
        sys.stderr.write("\n")
        return 3
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
