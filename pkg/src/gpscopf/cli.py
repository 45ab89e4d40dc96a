"""Command-line interface: one binary exposing the whole pipeline.

Subcommands: validate, powerflow, simulate, dataset, train, acopf,
study {loads|contingency|epsilon}, eval-accuracy. Flags override values
from an optional JSON config file (--config). Outputs are written
atomically (temp file + rename). GPSC_LOG={error,info,debug} controls log
verbosity. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import gp
from .acopf import assemble_acopf, split_x
from .caseio import parse_case, parse_dynamics, validate_case
from .dynamics import simulate
from .errors import GpscopfError
from .nlp import SolverOptions, solve_nlp
from .powerflow import solve_powerflow
from .stabcon import make_chance_spec, run_workflow, solve_gp_sc_acopf, stability_report
from .studies import (
    dataset_from_csv,
    dataset_to_csv,
    eval_sign_accuracy,
    gap_rows_csv,
    generate_dataset,
    outcome_table_csv,
    outcome_table_markdown,
    run_contingency_study,
    run_epsilon_sweep,
    run_load_study,
    train_generator_model,
)

log = logging.getLogger("gpscopf")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def _setup_logging():
    level = os.environ.get("GPSC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def write_atomic(path: str | Path, text: str):
    """No partial files: write to a sibling temp file, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None):
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _load_case(path):
    return parse_case(Path(path).read_text())


def _load_dyn(path, n_gen=None):
    return parse_dynamics(Path(path).read_text(), n_gen=n_gen)


def _load_models(models_dir):
    models = {}
    for path in sorted(Path(models_dir).glob("gen*.json")):
        model = gp.load(path.read_text())
        models[model.gen_id] = model
    if not models:
        raise GpscopfError(f"no model documents (gen*.json) found in {models_dir}")
    return models


def _solution_csv(problem, sol, case, spec=None, report=None):
    a = problem.meta.arrays
    vm, va, pg, qg = split_x(problem, sol.x)
    lines = ["kind,id,vm,va_deg,pg_mw,qg_mvar"]
    for i, b in enumerate(case.buses):
        lines.append(f"bus,{b.id},{vm[i]!r},{math.degrees(va[i])!r},,")
    for k, pos in enumerate(a.gen_pos):
        lines.append(
            f"gen,{pos},{vm[a.gen_bus[k]]!r},{math.degrees(va[a.gen_bus[k]])!r},"
            f"{pg[k] * a.base_mva!r},{qg[k] * a.base_mva!r}"
        )
    if report is not None:
        lines.append("# gen,mu,sigma,value,binding")
        for row in report:
            lines.append(
                f"# {row['gen']},{row['mu']!r},{row['sigma']!r},{row['value']!r},"
                f"{int(row['binding'])}"
            )
    lines.append(f"# objective,{sol.objective!r}")
    lines.append(f"# status,{sol.status}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args):
    case = _load_case(args.case)
    violations = validate_case(case)
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    return EXIT_OK


def cmd_powerflow(args):
    case = _load_case(args.case)
    sol = solve_powerflow(case)
    if not sol.converged:
        print(f"power flow did not converge: mismatch {sol.mismatch:.3e}", file=sys.stderr)
        return EXIT_DOMAIN
    from .caseio import case_arrays

    a = case_arrays(case)
    p_inj = np.zeros(a.n)
    q_inj = np.zeros(a.n)
    np.add.at(p_inj, a.gen_bus, sol.pg)
    np.add.at(q_inj, a.gen_bus, sol.qg)
    p_inj -= a.pd
    q_inj -= a.qd
    lines = ["bus,vm,va_deg,p_inj,q_inj"]
    for i, b in enumerate(case.buses):
        lines.append(
            f"{b.id},{sol.vm[i]!r},{math.degrees(sol.va[i])!r},{p_inj[i]!r},{q_inj[i]!r}"
        )
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_simulate(args):
    case = _load_case(args.case)
    dyn_params = _load_dyn(args.dyn)
    dyn = next((d for d in dyn_params if d.gen_index == args.gen), None)
    if dyn is None:
        print(f"no dynamics for generator {args.gen}", file=sys.stderr)
        return EXIT_USAGE
    traj = simulate(args.p, args.q, args.vm, args.va, dyn, horizon=args.horizon)
    lines = ["t,delta,omega"]
    for t, d, w in zip(traj.t, traj.delta, traj.omega):
        lines.append(f"{t!r},{d!r},{w!r}")
    lines.append(f"# terminated_early,{int(traj.terminated_early)},{traj.reason}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_dataset(args):
    case = _load_case(args.case)
    dyn_params = _load_dyn(args.dyn, n_gen=len(case.generators))
    rows = generate_dataset(
        case, dyn_params, args.gen, args.n, args.seed, horizon=args.horizon
    )
    _emit(dataset_to_csv(rows), args.out)
    return EXIT_OK


def cmd_train(args):
    rows = dataset_from_csv(Path(args.data).read_text())
    rows = [r for r in rows if r.gen_id == args.gen]
    if not rows:
        print(f"no rows for generator {args.gen} in {args.data}", file=sys.stderr)
        return EXIT_DOMAIN
    model = train_generator_model(rows, restarts=args.restarts, seed=args.seed)
    write_atomic(args.out, gp.save(model))
    print(f"trained gen {args.gen} on {len(rows)} rows -> {args.out}")
    return EXIT_OK


def cmd_acopf(args):
    case = _load_case(args.case)
    opts = SolverOptions(tol=args.tol)
    if args.models:
        dyn_params = _load_dyn(args.dyn, n_gen=len(case.generators))
        models = _load_models(args.models)
        spec = make_chance_spec(args.eps, models)
        if args.workflow:
            sol, mode = run_workflow(case, dyn_params, spec, opts)
            print(f"workflow mode: {mode}")
            if mode == "acopf":
                problem = assemble_acopf(case)
                report = None
            else:
                from .stabcon import assemble_gp_sc_acopf

                problem = assemble_gp_sc_acopf(case, dyn_params, spec)
                report = stability_report(problem, sol, spec)
        else:
            sol = solve_gp_sc_acopf(case, dyn_params, spec, opts)
            from .stabcon import assemble_gp_sc_acopf

            problem = assemble_gp_sc_acopf(case, dyn_params, spec)
            report = stability_report(problem, sol, spec)
    else:
        problem = assemble_acopf(case)
        sol = solve_nlp(problem, opts)
        report = None
    _emit(_solution_csv(problem, sol, case, report=report), args.out)
    if sol.status != "optimal":
        print(f"status: {sol.status} ({sol.message})", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_study(args):
    case = _load_case(args.case)
    dyn_params = _load_dyn(args.dyn, n_gen=len(case.generators))
    models = _load_models(args.models)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "loads":
        table = run_load_study(
            case, dyn_params, models, args.n, args.seed, eps=args.eps, jobs=args.jobs
        )
        write_atomic(out_dir / "load_study.csv", outcome_table_csv(table))
        write_atomic(out_dir / "load_study.md", outcome_table_markdown(table))
        print(outcome_table_markdown(table))
    elif args.kind == "contingency":
        table = run_contingency_study(
            case, dyn_params, models, args.n, args.seed, eps=args.eps, jobs=args.jobs
        )
        write_atomic(out_dir / "contingency_study.csv", outcome_table_csv(table))
        write_atomic(out_dir / "contingency_study.md", outcome_table_markdown(table))
        print(outcome_table_markdown(table))
    else:
        eps_list = [float(e) for e in args.eps_list.split(",")]
        rows = run_epsilon_sweep(case, dyn_params, models, eps_list)
        write_atomic(out_dir / "epsilon_sweep.csv", gap_rows_csv(rows))
        print(gap_rows_csv(rows))
    return EXIT_OK


def cmd_eval_accuracy(args):
    model = gp.load(Path(args.model).read_text())
    rows = dataset_from_csv(Path(args.data).read_text())
    rows = [r for r in rows if r.gen_id == model.gen_id]
    acc = eval_sign_accuracy(model, rows)
    print(f"sign accuracy: {acc:.4f} ({len(rows)} rows, gen {model.gen_id})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _apply_config(args, parser):
    """Fill argparse values from the JSON config file; flags win."""
    if not getattr(args, "config", None):
        return args
    cfg = json.loads(Path(args.config).read_text())
    for key, value in cfg.items():
        if hasattr(args, key) and parser.get_default(key) == getattr(args, key):
            setattr(args, key, value)
    return args


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gpscopf",
        description="AC optimal power flow with GP-based rotor-angle stability chance constraints",
    )
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a case file's invariants")
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("powerflow", help="Newton-Raphson power flow, per-bus CSV")
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("simulate", help="integrate one generator's swing dynamics")
    p.add_argument("--case", required=True)
    p.add_argument("--dyn", required=True)
    p.add_argument("--gen", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--vm", type=float, required=True)
    p.add_argument("--va", type=float, required=True)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="sample labeled operating points for one generator")
    p.add_argument("--case", required=True)
    p.add_argument("--dyn", required=True)
    p.add_argument("--gen", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train one generator's growth-rate model")
    p.add_argument("--data", required=True)
    p.add_argument("--gen", type=int, required=True)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("acopf", help="dispatch optimization, optionally stability-constrained")
    p.add_argument("--case", required=True)
    p.add_argument("--dyn")
    p.add_argument("--models", help="directory of trained gen*.json models")
    p.add_argument("--eps", type=float, default=0.95)
    p.add_argument("--workflow", action="store_true",
                   help="plain dispatch first, constrained solve only if unstable")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_acopf)

    p = sub.add_parser("study", help="reproduction studies")
    p.add_argument("kind", choices=["loads", "contingency", "epsilon"])
    p.add_argument("--case", required=True)
    p.add_argument("--dyn", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--eps", type=float, default=0.95)
    p.add_argument("--eps-list", default="0.9,0.95,0.98,0.99,0.999")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", default="study_out")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("eval-accuracy", help="sign accuracy of a model on a dataset CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval_accuracy)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "eps", None) is not None and not (0.0 < args.eps < 1.0):
        parser.error(f"--eps must lie strictly in (0, 1), got {args.eps}")
    try:
        args = _apply_config(args, parser)
        return args.func(args)
    except GpscopfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
