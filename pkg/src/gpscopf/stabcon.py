"""Chance-constrained stability rows for the dispatch NLP.

Each generator contributes one smooth inequality

    mu_g(x_g) + z * sigma_g(x_g) <= 0,      z = inv_norm_cdf(1 - epsilon)

where (mu_g, sigma_g) are the GP's predictive mean/deviation of the
envelope growth rate at x_g = (delta0, omega_s, vm, va), and delta0 is an
implicit function of (p, q, vm, va) through the steady-state
initialization. Gradients chain the GP input gradients through the
implicit-function sensitivity of the initialization equations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import gp
from .acopf import assemble_acopf
from .caseio import DynParams, NetworkCase
from .dynamics import classify, init_state, simulate
from .errors import GpscopfError, InitError
from .nlp import INEQ, ConstraintBlock, NlpProblem, NlpSolution, SolverOptions, solve_nlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChanceSpec:
    """epsilon is the residual risk tolerance: each row enforces stability
    with probability at least 1 - epsilon, via z = inv_norm_cdf(1 - epsilon).
    """

    epsilon: float
    z: float
    models: dict  # gen position in the case -> GpModel


def make_chance_spec(eps: float, models: dict) -> ChanceSpec:
    """Build a ChanceSpec from the experiment-facing confidence level.

    The studies and CLI quote eps as the enforced stability probability
    (eps=0.95 means each generator stays stable with probability >= 0.95),
    so the stored risk tolerance is 1 - eps and z = inv_norm_cdf(eps) > 0
    for eps > 0.5. Construct ChanceSpec directly to specify the risk
    tolerance itself.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    return ChanceSpec(epsilon=1.0 - eps, z=inv_norm_cdf(eps), models=models)


# ---------------------------------------------------------------------------
# standard-normal quantile

_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def inv_norm_cdf(p: float) -> float:
    """Standard-normal quantile: rational approximation plus two Newton
    refinements against the complementary-error-function CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {p}")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        z = (
            (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5])
            * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        z = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    for _ in range(2):
        err = norm_cdf(z) - p
        pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        if pdf <= 0.0:
            break
        z -= err / pdf
    return z


# ---------------------------------------------------------------------------
# implicit sensitivity of the steady-state initialization


def init_sensitivity(p, q, vm, va, dyn: DynParams) -> np.ndarray:
    """d(delta0, eqp0)/d(p, q, vm, va) via the implicit function theorem."""
    delta0, eqp0, _ = init_state(p, q, vm, va, dyn)
    x = dyn.xd_prime
    sin_d = math.sin(delta0 - va)
    cos_d = math.cos(delta0 - va)
    j_state = np.array(
        [
            [eqp0 * vm * cos_d / x, vm * sin_d / x],
            [-eqp0 * vm * sin_d / x, vm * cos_d / x],
        ]
    )
    det = j_state[0, 0] * j_state[1, 1] - j_state[0, 1] * j_state[1, 0]
    if abs(det) < 1e-12:
        cond = float(np.linalg.cond(j_state))
        raise InitError(
            f"initialization Jacobian singular (det={det:.3e}, cond={cond:.3e})"
        )
    j_params = np.array(
        [
            [-1.0, 0.0, eqp0 * sin_d / x, -eqp0 * vm * cos_d / x],
            [0.0, -1.0, (eqp0 * cos_d - 2.0 * vm) / x, eqp0 * vm * sin_d / x],
        ]
    )
    return -np.linalg.solve(j_state, j_params)


# ---------------------------------------------------------------------------
# the chance-constraint row


def stability_constraint(model: gp.GpModel, dyn: DynParams, p, q, vm, va, z: float):
    """Value mu + z*sigma and its gradient wrt (p, q, vm, va).

    A degenerate initialization (vanishing EMF) is retried with the
    reactive injection damped toward zero; the retreat is logged and the
    final failure raised with diagnostics.
    """
    q_eff, tried = q, 0
    while True:
        try:
            delta0, eqp0, omega0 = init_state(p, q_eff, vm, va, dyn)
            if eqp0 > 1e-6:
                break
            raise InitError(f"EMF collapsed (eqp0={eqp0:.3e})")
        except InitError:
            tried += 1
            if tried > 5:
                raise
            q_eff = 0.5 * q_eff
            log.warning(
                "stability row: damped retry %d with q=%.4f (from %.4f)", tried, q_eff, q
            )
    x_g = np.array([delta0, omega0, vm, va])
    mu, var = gp.predict(model, x_g)
    sigma = math.sqrt(var)
    value = mu + z * sigma

    dmu, dsigma, _ = gp.predict_grad(model, x_g)
    sens = init_sensitivity(p, q_eff, vm, va, dyn)  # rows: (delta0, eqp0)
    # d x_g / d (p, q, vm, va): delta0 row from the implicit sensitivity,
    # omega0 is constant, vm and va are direct pass-throughs
    dxg = np.zeros((4, 4))
    dxg[0] = sens[0]
    dxg[2, 2] = 1.0
    dxg[3, 3] = 1.0
    grad = (dmu + z * dsigma) @ dxg
    return value, grad, mu, sigma


# ---------------------------------------------------------------------------
# problem assembly and solves


def assemble_gp_sc_acopf(
    case: NetworkCase, dyn_params: list[DynParams], spec: ChanceSpec
) -> NlpProblem:
    """ACOPF plus one stability row per in-service generator."""
    problem = assemble_acopf(case)
    a = problem.meta.arrays
    off = problem.meta.off
    dyn_by_pos = {d.gen_index: d for d in dyn_params}

    gens = []
    for k, pos in enumerate(a.gen_pos):
        if pos not in spec.models:
            raise GpscopfError(f"no trained stability model for generator {pos}")
        if pos not in dyn_by_pos:
            raise GpscopfError(f"no dynamics parameters for generator {pos}")
        gens.append((k, spec.models[pos], dyn_by_pos[pos]))

    ng = len(gens)
    cols = np.zeros((ng, 4), dtype=np.int64)
    for r, (k, _, _) in enumerate(gens):
        b = a.gen_bus[k]
        cols[r] = (off.pg + k, off.qg + k, off.vm + b, off.va + b)

    def row_value_grad(x, r):
        k, model, dyn = gens[r]
        pk, qk, vmk, vak = x[cols[r, 0]], x[cols[r, 1]], x[cols[r, 2]], x[cols[r, 3]]
        return stability_constraint(model, dyn, pk, qk, vmk, vak, spec.z)

    def eval_stability(x):
        vals = np.empty(ng)
        data = np.empty(4 * ng)
        for r in range(ng):
            value, grad, _, _ = row_value_grad(x, r)
            vals[r] = value
            data[4 * r : 4 * r + 4] = grad
        rows = np.repeat(np.arange(ng), 4)
        jac = sp.csr_matrix((data, (rows, cols.ravel())), shape=(ng, problem.n))
        return vals, jac

    def hess_stability(x, lam):
        # 4x4 central differences of the analytic row gradient; exact enough
        # for Newton progress, and the only second-order information the GP
        # chain does not provide in closed form
        out = sp.lil_matrix((problem.n, problem.n))
        h = 1e-5
        for r in range(ng):
            if abs(lam[r]) < 1e-12:
                continue
            hr = np.zeros((4, 4))
            for d in range(4):
                xp = x.copy()
                xp[cols[r, d]] += h
                xm = x.copy()
                xm[cols[r, d]] -= h
                gp_ = row_value_grad(xp, r)[1]
                gm_ = row_value_grad(xm, r)[1]
                hr[d] = (gp_ - gm_) / (2.0 * h)
            hr = 0.5 * (hr + hr.T) * lam[r]
            for i in range(4):
                for j in range(4):
                    out[cols[r, i], cols[r, j]] += hr[i, j]
        return out.tocsr()

    problem.add_block(
        ConstraintBlock(
            name="stability",
            kind=INEQ,
            m=ng,
            eval=eval_stability,
            hess=hess_stability,
            row_names=[f"stab[{a.gen_pos[k]}]" for k, _, _ in gens],
        )
    )
    problem.meta.stab_rows = [(int(a.gen_pos[k]), k, model, dyn) for k, model, dyn in gens]
    problem.meta.stab_cols = cols
    return problem


def solve_gp_sc_acopf(
    case: NetworkCase,
    dyn_params: list[DynParams],
    spec: ChanceSpec,
    opts: SolverOptions | None = None,
    warm: NlpSolution | None = None,
) -> NlpSolution:
    """Solve the stability-constrained problem, warm-started from the plain
    ACOPF optimum by default."""
    opts = opts or SolverOptions()
    if warm is None:
        base = assemble_acopf(case)
        warm = solve_nlp(base, opts)
    problem = assemble_gp_sc_acopf(case, dyn_params, spec)
    warm_opts = SolverOptions(**{**opts.__dict__, "mu_init": min(opts.mu_init, 1e-2)})
    return solve_nlp(problem, warm_opts, x0=warm.x)


def stability_report(problem: NlpProblem, solution: NlpSolution, spec: ChanceSpec):
    """Per-generator rows (gen, mu, sigma, value, binding) at a solution."""
    a = problem.meta.arrays
    cols = problem.meta.stab_cols
    x = solution.x
    duals = solution.duals.get("stability")
    out = []
    for r, (pos, k, model, dyn) in enumerate(problem.meta.stab_rows):
        p, q, vm, va = (x[c] for c in cols[r])
        value, _, mu, sigma = stability_constraint(model, dyn, p, q, vm, va, spec.z)
        binding = abs(value) <= 1e-6 and (duals is None or duals[r] > 1e-8)
        out.append({"gen": pos, "mu": mu, "sigma": sigma, "value": value, "binding": binding})
    return out


def dispatch_stability(
    case: NetworkCase,
    dyn_params: list[DynParams],
    vm: np.ndarray,
    va: np.ndarray,
    pg: np.ndarray,
    qg: np.ndarray,
    horizon: float = 10.0,
):
    """Simulate every in-service generator at a dispatch point.

    Returns (all_stable, labels) with one StabilityLabel per generator; a
    dispatch is stable only if every rotor-angle trajectory is.
    """
    from .caseio import case_arrays

    a = case_arrays(case)
    dyn_by_pos = {d.gen_index: d for d in dyn_params}
    labels = []
    for k, pos in enumerate(a.gen_pos):
        dyn = dyn_by_pos[pos]
        b = a.gen_bus[k]
        traj = simulate(float(pg[k]), float(qg[k]), float(vm[b]), float(va[b]), dyn, horizon=horizon)
        labels.append(classify(traj, dyn))
    return all(l.stable for l in labels), labels


def run_workflow(
    case: NetworkCase,
    dyn_params: list[DynParams],
    spec: ChanceSpec,
    opts: SolverOptions | None = None,
):
    """Dispatch workflow: plain ACOPF first, the GP-constrained problem only
    when simulation finds the cheap dispatch unstable.

    Returns (solution, mode) with mode in {"acopf", "gp_sc_acopf"}.
    """
    from .acopf import split_x

    opts = opts or SolverOptions()
    base = assemble_acopf(case)
    sol = solve_nlp(base, opts)
    if sol.status == "optimal":
        vm, va, pg, qg = split_x(base, sol.x)
        stable, _ = dispatch_stability(case, dyn_params, vm, va, pg, qg)
        if stable:
            return sol, "acopf"
    gp_sol = solve_gp_sc_acopf(case, dyn_params, spec, opts, warm=sol)
    return gp_sol, "gp_sc_acopf"
