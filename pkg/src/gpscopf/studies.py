"""Dataset generation and the three reproduction studies: stability under
randomized loads, N-1 generator contingencies, and the epsilon/objective
sweep. All studies are seed-deterministic end to end, including under a
process pool (scenario attempts are keyed by attempt index, and the first
n feasible attempts in index order are kept).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import gp
from .acopf import assemble_acopf, split_x
from .caseio import DynParams, NetworkCase, case_arrays, PQ, PV, REF
from .dynamics import classify, init_state, simulate
from .errors import GpscopfError
from .expfit import fit_exponential
from .nlp import SolverOptions, solve_nlp
from .powerflow import solve_powerflow
from .stabcon import ChanceSpec, dispatch_stability, make_chance_spec, solve_gp_sc_acopf

log = logging.getLogger(__name__)

VA_SAMPLE_RANGE = (-0.35, 0.35)  # rad; absolute-angle sampling window
DATASET_HEADER = "gen_id,delta0,omega0,vm,va,p,q,alpha,beta,rmse,stable"


@dataclass(frozen=True)
class DatasetRow:
    gen_id: int
    delta0: float
    omega0: float
    vm: float
    va: float
    p: float
    q: float
    alpha: float
    beta: float
    rmse: float
    stable: bool


@dataclass
class OutcomeTable:
    """Joint stability outcomes of the plain and GP-constrained dispatch."""

    counts: dict  # keys: (acopf_stable, gpsc_stable) -> int
    n_scenarios: int
    seed: int
    epsilon: float
    discarded: int = 0
    excluded: int = 0
    gp_failures: int = 0
    acopf_solve_time: float = 0.0
    gpsc_solve_time: float = 0.0

    @property
    def acopf_stable_fraction(self):
        n = max(1, self.n_scenarios)
        return (self.counts[(True, True)] + self.counts[(True, False)]) / n

    @property
    def gpsc_stable_fraction(self):
        n = max(1, self.n_scenarios)
        return (self.counts[(True, True)] + self.counts[(False, True)]) / n

    @property
    def workflow_stable_fraction(self):
        n = max(1, self.n_scenarios)
        return 1.0 - self.counts[(False, False)] / n


@dataclass(frozen=True)
class GapRow:
    case: str
    epsilon: float
    gap_percent: float
    acopf_objective: float
    gpsc_objective: float
    valid: bool
    note: str = ""


def empty_counts():
    return {(False, False): 0, (False, True): 0, (True, False): 0, (True, True): 0}


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(
    case: NetworkCase,
    dyn_params: list[DynParams],
    gen: int,
    n: int,
    seed: int,
    horizon: float = 10.0,
    va_range=VA_SAMPLE_RANGE,
) -> list[DatasetRow]:
    """Sample operating points for one generator and label them.

    vm ~ U(bus bounds), va ~ U(va_range), p ~ U(pmin, pmax),
    q ~ U(qmin, qmax); each row carries the envelope fit (alpha, beta) and
    the simulation oracle's stable flag. Degenerate initializations are
    resampled (logged); the budget is 10n attempts.
    """
    a = case_arrays(case)
    k = int(np.flatnonzero(a.gen_pos == gen)[0])
    b = a.gen_bus[k]
    dyn = next(d for d in dyn_params if d.gen_index == gen)
    rng = np.random.default_rng(seed)

    rows = []
    resampled = 0
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 10 * n:
            raise GpscopfError(f"resample budget exhausted for generator {gen}")
        vm = rng.uniform(a.vmin[b], a.vmax[b])
        va = rng.uniform(*va_range)
        p = rng.uniform(a.pmin[k], a.pmax[k])
        q = rng.uniform(a.qmin[k], a.qmax[k])
        try:
            delta0, eqp0, omega0 = init_state(p, q, vm, va, dyn)
            if eqp0 <= 1e-6:
                raise GpscopfError("EMF collapsed")
        except GpscopfError:
            resampled += 1
            continue
        traj = simulate(p, q, vm, va, dyn, horizon=horizon)
        fit = fit_exponential(traj)
        label = classify(traj, dyn)
        rows.append(
            DatasetRow(
                gen_id=gen, delta0=delta0, omega0=omega0, vm=vm, va=va, p=p, q=q,
                alpha=fit.alpha, beta=fit.beta, rmse=fit.rmse, stable=label.stable,
            )
        )
    if resampled:
        log.info("generator %d: resampled %d degenerate draws", gen, resampled)
    return rows


def dataset_to_csv(rows: list[DatasetRow]) -> str:
    buf = io.StringIO()
    buf.write(DATASET_HEADER + "\n")
    for r in rows:
        buf.write(
            f"{r.gen_id},{r.delta0!r},{r.omega0!r},{r.vm!r},{r.va!r},"
            f"{r.p!r},{r.q!r},{r.alpha!r},{r.beta!r},{r.rmse!r},{int(r.stable)}\n"
        )
    return buf.getvalue()


def dataset_from_csv(text: str) -> list[DatasetRow]:
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    for rec in reader:
        rows.append(
            DatasetRow(
                gen_id=int(rec["gen_id"]),
                delta0=float(rec["delta0"]),
                omega0=float(rec["omega0"]),
                vm=float(rec["vm"]),
                va=float(rec["va"]),
                p=float(rec["p"]),
                q=float(rec["q"]),
                alpha=float(rec["alpha"]),
                beta=float(rec["beta"]),
                rmse=float(rec["rmse"]),
                stable=bool(int(rec["stable"])),
            )
        )
    return rows


def rows_to_xy(rows: list[DatasetRow]):
    x = np.array([[r.delta0, r.omega0, r.vm, r.va] for r in rows])
    y = np.array([r.beta for r in rows])
    return x, y


def train_generator_model(rows: list[DatasetRow], restarts=5, seed=0) -> gp.GpModel:
    x, y = rows_to_xy(rows)
    model = gp.train(x, y, restarts=restarts, seed=seed)
    model.gen_id = rows[0].gen_id if rows else -1
    return model


def eval_sign_accuracy(model: gp.GpModel, test_rows: list[DatasetRow]) -> float:
    """Fraction of rows where the predicted and fitted rates agree on
    stability (both treat 0 as stable-side)."""
    if not test_rows:
        raise ValueError("empty test set")
    x, y = rows_to_xy(test_rows)
    mu, _ = gp.predict(model, x)
    return float(np.mean((mu <= 0) == (y <= 0)))


# ---------------------------------------------------------------------------
# case editing helpers


def scale_loads(case: NetworkCase, factors: np.ndarray) -> NetworkCase:
    """Per-bus load scaling, same factor on pd and qd (constant power factor)."""
    buses = tuple(
        replace(b, pd=b.pd * f, qd=b.qd * f) for b, f in zip(case.buses, factors)
    )
    return replace(case, buses=buses)


def outage_generator(case: NetworkCase, gen_pos: int) -> NetworkCase:
    gens = list(case.generators)
    gens[gen_pos] = replace(gens[gen_pos], status=0)
    case2 = replace(case, generators=tuple(gens))
    # keep a REF bus with a live generator: repoint if the outage removed it
    a = case_arrays(case2)
    ref_has_gen = np.any(a.gen_bus == a.ref)
    if not ref_has_gen and a.ng:
        new_ref_bus = case2.buses[a.gen_bus[int(np.argmax(a.pmax))]].id
        buses = []
        for b in case2.buses:
            if b.bus_type == REF:
                buses.append(replace(b, bus_type=PV))
            elif b.id == new_ref_bus:
                buses.append(replace(b, bus_type=REF))
            else:
                buses.append(b)
        case2 = replace(case2, buses=tuple(buses))
    return case2


def redistribute_outage(pg: np.ndarray, pmax: np.ndarray, out_idx: int) -> np.ndarray:
    """Shift the outaged unit's output to the survivors, proportional to
    their current output, clipping at pmax with waterfall reallocation."""
    pg = pg.astype(float).copy()
    lost = pg[out_idx]
    pg[out_idx] = 0.0
    alive = np.ones(len(pg), dtype=bool)
    alive[out_idx] = False
    for _ in range(len(pg)):
        room = np.flatnonzero(alive & (pg < pmax - 1e-12))
        if lost <= 1e-12 or len(room) == 0:
            break
        base = pg[room].sum()
        share = pg[room] / base if base > 1e-9 else np.full(len(room), 1.0 / len(room))
        add = np.minimum(lost * share, pmax[room] - pg[room])
        pg[room] += add
        lost -= add.sum()
    if lost > 1e-9:
        raise GpscopfError(f"redistribution infeasible: {lost:.4f} p.u. unplaced")
    return pg


# ---------------------------------------------------------------------------
# scenario workers (top level for pickling)


def _feasible_load_case(case, seed, scale_range, opts):
    """Draw a load realization; returns (case, acopf solution or None)."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(scale_range[0], scale_range[1], len(case.buses))
    scen = scale_loads(case, factors)
    problem = assemble_acopf(scen)
    t0 = time.perf_counter()
    sol = solve_nlp(problem, opts)
    dt = time.perf_counter() - t0
    if sol.status != "optimal":
        return None
    return scen, problem, sol, dt


def _load_study_attempt(args):
    case, dyn_params, spec, seed, scale_range, opt_kw, horizon = args
    opts = SolverOptions(**opt_kw)
    drawn = _feasible_load_case(case, seed, scale_range, opts)
    if drawn is None:
        return {"ok": False}
    scen, problem, acopf_sol, t_acopf = drawn
    vm, va, pg, qg = split_x(problem, acopf_sol.x)
    a_stable, _ = dispatch_stability(scen, dyn_params, vm, va, pg, qg, horizon=horizon)

    t0 = time.perf_counter()
    gp_sol = solve_gp_sc_acopf(scen, dyn_params, spec, opts, warm=acopf_sol)
    t_gpsc = time.perf_counter() - t0
    gp_failed = gp_sol.status != "optimal"
    if gp_failed:
        g_stable = False
    else:
        gvm, gva, gpg, gqg = split_x(problem, gp_sol.x)  # same layout
        g_stable, _ = dispatch_stability(scen, dyn_params, gvm, gva, gpg, gqg, horizon=horizon)
    return {
        "ok": True,
        "acopf_stable": bool(a_stable),
        "gpsc_stable": bool(g_stable),
        "gp_failed": bool(gp_failed),
        "t_acopf": t_acopf,
        "t_gpsc": t_gpsc,
    }


def _contingency_attempt(args):
    case, dyn_params, spec, seed, scale_range, opt_kw, horizon = args
    opts = SolverOptions(**opt_kw)
    drawn = _feasible_load_case(case, seed, scale_range, opts)
    if drawn is None:
        return {"ok": False}
    scen, problem, acopf_sol, t_acopf = drawn
    a = problem.meta.arrays
    rng = np.random.default_rng(seed + 1_000_003)
    out_k = int(rng.integers(a.ng))  # index into live gens

    t0 = time.perf_counter()
    gp_sol = solve_gp_sc_acopf(scen, dyn_params, spec, opts, warm=acopf_sol)
    t_gpsc = time.perf_counter() - t0
    results = {}
    excluded = False
    for tag, sol in (("acopf", acopf_sol), ("gpsc", gp_sol)):
        if sol.status != "optimal":
            results[tag] = False
            continue
        vm, va, pg, qg = split_x(problem, sol.x)
        try:
            pg_post = redistribute_outage(pg, a.pmax, out_k)
        except GpscopfError:
            excluded = True
            break
        out_case = outage_generator(scen, int(a.gen_pos[out_k]))
        a2 = case_arrays(out_case)
        keep = np.flatnonzero(a.gen_pos != a.gen_pos[out_k])
        vset = vm[a.gen_bus[keep]]
        try:
            pf = solve_powerflow(out_case, pg=pg_post[keep], vm_setpoint=vset)
        except GpscopfError:
            results[tag] = False
            continue
        if not pf.converged:
            results[tag] = False
            continue
        dyn_alive = [d for d in dyn_params if d.gen_index in set(a2.gen_pos.tolist())]
        stable, _ = dispatch_stability(
            out_case, dyn_alive, pf.vm, pf.va, pf.pg, pf.qg, horizon=horizon
        )
        results[tag] = bool(stable)
    if excluded:
        return {"ok": True, "excluded": True}
    return {
        "ok": True,
        "excluded": False,
        "acopf_stable": results["acopf"],
        "gpsc_stable": results["gpsc"],
        "gp_failed": gp_sol.status != "optimal",
        "t_acopf": t_acopf,
        "t_gpsc": t_gpsc,
    }


def _run_attempts(worker, make_args, n, jobs):
    """Run attempt workers until n usable results.

    Attempts are indexed deterministically; the first n ok results in
    attempt order are kept and the discard count tallies the failed
    attempts before the n-th success, so the outcome is independent of the
    pool size.
    """
    budget = max(20, 10 * n)
    collected: dict[int, dict] = {}
    next_attempt = 0

    def ordered_ok():
        return [collected[i] for i in sorted(collected) if collected[i]["ok"]]

    if jobs <= 1:
        while len(ordered_ok()) < n and next_attempt < budget:
            collected[next_attempt] = worker(make_args(next_attempt))
            next_attempt += 1
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            while len(ordered_ok()) < n and next_attempt < budget:
                wave_end = min(budget, next_attempt + 2 * jobs)
                futs = {
                    i: pool.submit(worker, make_args(i)) for i in range(next_attempt, wave_end)
                }
                for i in sorted(futs):
                    collected[i] = futs[i].result()
                next_attempt = wave_end

    oks = ordered_ok()[:n]
    if len(oks) < n:
        raise GpscopfError(f"regeneration budget exhausted: {len(oks)}/{n} scenarios")
    # attempts consumed through the n-th success, independent of jobs
    ok_seen = 0
    for i in sorted(collected):
        ok_seen += int(collected[i]["ok"])
        if ok_seen == n:
            return oks, i + 1
    return oks, next_attempt


def run_load_study(
    case: NetworkCase,
    dyn_params: list[DynParams],
    models: dict,
    n: int,
    seed: int,
    eps: float = 0.95,
    scale_range=(0.5, 1.5),
    jobs: int = 1,
    horizon: float = 10.0,
    opts: SolverOptions | None = None,
) -> OutcomeTable:
    """Randomized-load stability comparison of the two formulations."""
    spec = make_chance_spec(eps, models)
    opt_kw = dataclasses.asdict(opts or SolverOptions())

    def make_args(attempt):
        return (case, dyn_params, spec, seed + 7919 * attempt, scale_range, opt_kw, horizon)

    results, attempts = _run_attempts(_load_study_attempt, make_args, n, jobs)
    table = OutcomeTable(
        counts=empty_counts(), n_scenarios=len(results), seed=seed, epsilon=eps,
        discarded=attempts - len(results),
    )
    t_a, t_g = [], []
    for r in results:
        table.counts[(r["acopf_stable"], r["gpsc_stable"])] += 1
        table.gp_failures += int(r["gp_failed"])
        t_a.append(r["t_acopf"])
        t_g.append(r["t_gpsc"])
    table.acopf_solve_time = float(np.mean(t_a)) if t_a else 0.0
    table.gpsc_solve_time = float(np.mean(t_g)) if t_g else 0.0
    return table


def run_contingency_study(
    case: NetworkCase,
    dyn_params: list[DynParams],
    models: dict,
    n: int,
    seed: int,
    eps: float = 0.95,
    scale_range=(0.5, 1.5),
    jobs: int = 1,
    horizon: float = 10.0,
    opts: SolverOptions | None = None,
) -> OutcomeTable:
    """N-1 generator outage study with proportional redistribution and a
    post-contingency power flow before stability labeling."""
    a = case_arrays(case)
    if a.ng < 2:
        raise GpscopfError("contingency study needs at least two in-service generators")
    spec = make_chance_spec(eps, models)
    opt_kw = dataclasses.asdict(opts or SolverOptions())

    def make_args(attempt):
        return (case, dyn_params, spec, seed + 7919 * attempt, scale_range, opt_kw, horizon)

    results, attempts = _run_attempts(_contingency_attempt, make_args, n, jobs)
    usable = [r for r in results if not r.get("excluded")]
    table = OutcomeTable(
        counts=empty_counts(), n_scenarios=len(usable), seed=seed, epsilon=eps,
        discarded=attempts - len(results), excluded=len(results) - len(usable),
    )
    t_a, t_g = [], []
    for r in usable:
        table.counts[(r["acopf_stable"], r["gpsc_stable"])] += 1
        table.gp_failures += int(r["gp_failed"])
        t_a.append(r["t_acopf"])
        t_g.append(r["t_gpsc"])
    table.acopf_solve_time = float(np.mean(t_a)) if t_a else 0.0
    table.gpsc_solve_time = float(np.mean(t_g)) if t_g else 0.0
    return table


def run_epsilon_sweep(
    case: NetworkCase,
    dyn_params: list[DynParams],
    models: dict,
    eps_list=(0.9, 0.95, 0.98, 0.99, 0.999),
    opts: SolverOptions | None = None,
) -> list[GapRow]:
    """Objective gap of the stability-constrained problem at nominal loads."""
    opts = opts or SolverOptions()
    problem = assemble_acopf(case)
    base = solve_nlp(problem, opts)
    rows = []
    for eps in eps_list:
        if base.status != "optimal":
            rows.append(GapRow(case.name, eps, float("nan"), float("nan"), float("nan"),
                               valid=False, note=f"acopf {base.status}"))
            continue
        spec = make_chance_spec(eps, models)
        sol = solve_gp_sc_acopf(case, dyn_params, spec, opts, warm=base)
        if sol.status != "optimal":
            rows.append(GapRow(case.name, eps, float("nan"), base.objective, float("nan"),
                               valid=False, note=f"gp_sc_acopf {sol.status}"))
            continue
        gap = 100.0 * abs(sol.objective - base.objective) / base.objective
        rows.append(GapRow(case.name, eps, gap, base.objective, sol.objective, valid=True))
    return rows


# ---------------------------------------------------------------------------
# table rendering


def outcome_table_csv(table: OutcomeTable) -> str:
    lines = ["acopf,gp_sc_acopf,count,percent"]
    n = max(1, table.n_scenarios)
    for (a_st, g_st), cnt in sorted(table.counts.items()):
        lines.append(
            f"{'stable' if a_st else 'unstable'},{'stable' if g_st else 'unstable'},"
            f"{cnt},{100.0 * cnt / n:.1f}"
        )
    lines.append(f"# n_scenarios,{table.n_scenarios}")
    lines.append(f"# seed,{table.seed}")
    lines.append(f"# epsilon,{table.epsilon}")
    lines.append(f"# discarded,{table.discarded}")
    lines.append(f"# excluded,{table.excluded}")
    lines.append(f"# gp_failures,{table.gp_failures}")
    lines.append(f"# mean_acopf_solve_s,{table.acopf_solve_time:.4f}")
    lines.append(f"# mean_gpsc_solve_s,{table.gpsc_solve_time:.4f}")
    return "\n".join(lines) + "\n"


def outcome_table_markdown(table: OutcomeTable) -> str:
    n = max(1, table.n_scenarios)
    rows = [
        ("unstable", "unstable", table.counts[(False, False)]),
        ("unstable", "stable", table.counts[(False, True)]),
        ("stable", "unstable", table.counts[(True, False)]),
        ("stable", "stable", table.counts[(True, True)]),
    ]
    out = ["| ACOPF | GP-SC-ACOPF | Percentage |", "| --- | --- | --- |"]
    for a_st, g_st, cnt in rows:
        out.append(f"| {a_st} | {g_st} | {100.0 * cnt / n:.1f}% |")
    out.append("")
    out.append(
        f"stable fractions: acopf {100 * table.acopf_stable_fraction:.1f}%, "
        f"gp-sc {100 * table.gpsc_stable_fraction:.1f}%, "
        f"workflow {100 * table.workflow_stable_fraction:.1f}% "
        f"(n={table.n_scenarios}, eps={table.epsilon}, seed={table.seed})"
    )
    return "\n".join(out) + "\n"


def gap_rows_csv(rows: list[GapRow]) -> str:
    lines = ["case,epsilon,gap_percent"]
    for r in rows:
        lines.append(f"{r.case},{r.epsilon},{r.gap_percent:.6f}" + ("" if r.valid else f",invalid:{r.note}"))
    return "\n".join(lines) + "\n"
