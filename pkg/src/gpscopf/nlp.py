"""Primal-dual interior-point solver for smooth NLPs with first derivatives.

The problem form is

    minimize f(x)
    s.t.     c_E(x) = 0          (equality blocks)
             g(x) <= 0           (inequality blocks, slacked internally)
             lb <= x <= ub       (box bounds, +-inf allowed)

Inequalities receive slack variables (g + s = 0, s >= 0) and all bounds are
handled by a logarithmic barrier with Fiacco-McCormick reduction (mu/10
once the inner Newton iteration has converged for the current mu). Steps
come from the condensed symmetric KKT system with diagonal inertia
correction, globalized by a fraction-to-boundary rule and a backtracking
line search on an l1 penalty merit function.

Second derivatives: the objective Hessian is exact (callback); constraint
blocks may supply a multiplier-weighted Hessian callback. Blocks without
one contribute only their Gauss-Newton term (the slack elimination's
J^T Sigma J), which keeps the method correct but slows the local rate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

EQ = "eq"
INEQ = "ineq"


@dataclass
class ConstraintBlock:
    """A group of constraint rows sharing one evaluation callback.

    eval(x) returns (values, jacobian) with a sparsity pattern that must
    not change between calls. hess(x, lam), when given, returns
    sum_i lam_i * hess(c_i) as a sparse n x n matrix.
    """

    name: str
    kind: str  # EQ or INEQ (ineq rows satisfy g(x) <= 0)
    m: int
    eval: Callable
    hess: Callable | None = None
    row_names: list | None = None


class NlpProblem:
    def __init__(self, n, lb, ub, x0, objective, obj_hess=None, var_names=None):
        self.n = int(n)
        self.lb = np.asarray(lb, dtype=float)
        self.ub = np.asarray(ub, dtype=float)
        self.x0 = np.asarray(x0, dtype=float)
        self.objective = objective  # x -> (value, gradient)
        self.obj_hess = obj_hess  # x -> sparse n x n
        self.var_names = var_names or [f"x{i}" for i in range(n)]
        self.blocks: list[ConstraintBlock] = []

    def add_block(self, block: ConstraintBlock):
        self.blocks.append(block)

    def eq_blocks(self):
        return [b for b in self.blocks if b.kind == EQ]

    def ineq_blocks(self):
        return [b for b in self.blocks if b.kind == INEQ]

    def block(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 300
    mu_init: float = 0.1
    mu_min_factor: float = 0.01  # mu floor = tol * factor
    kappa_eps: float = 10.0  # inner loop leaves when E_mu <= kappa_eps * mu
    tau_min: float = 0.99
    armijo: float = 1e-2
    alpha_min: float = 1e-12
    bound_push: float = 1e-2
    slack_floor: float = 1e-2
    hessian: str = "exact"  # "exact" uses block callbacks where present, "gauss_newton" none
    verbose: bool = False


@dataclass
class NlpSolution:
    x: np.ndarray
    duals: dict
    zl: np.ndarray
    zu: np.ndarray
    objective: float
    status: str  # optimal | infeasible_detected | iteration_limit | numerical_failure
    kkt: dict
    iterations: int
    wall_time: float
    mu_final: float
    message: str = ""


def _stack_eval(blocks, x):
    vals, jacs = [], []
    for b in blocks:
        v, j = b.eval(x)
        vals.append(np.atleast_1d(np.asarray(v, dtype=float)))
        jacs.append(j)
    if not blocks:
        return np.zeros(0), sp.csr_matrix((0, len(x)))
    return np.concatenate(vals), sp.vstack(jacs, format="csr")


def _slices(blocks):
    out, k = {}, 0
    for b in blocks:
        out[b.name] = slice(k, k + b.m)
        k += b.m
    return out


class _Workspace:
    """Mutable state of one solve; one instance per solve_nlp call."""

    def __init__(self, problem: NlpProblem, opts: SolverOptions, x0=None):
        self.p = problem
        self.o = opts
        n = problem.n
        lb, ub = problem.lb, problem.ub
        self.has_lb = np.isfinite(lb)
        self.has_ub = np.isfinite(ub)

        x = np.array(problem.x0 if x0 is None else x0, dtype=float)
        # push the start strictly inside the box
        span = np.where(self.has_lb & self.has_ub, ub - lb, 1.0)
        push = np.minimum(opts.bound_push, 1e-2 * span)
        x = np.where(self.has_lb, np.maximum(x, lb + push), x)
        x = np.where(self.has_ub, np.minimum(x, ub - push), x)
        self.x = x

        self.eqb = problem.eq_blocks()
        self.inb = problem.ineq_blocks()
        self.me = sum(b.m for b in self.eqb)
        self.mi = sum(b.m for b in self.inb)

        g0, _ = _stack_eval(self.inb, x)
        self.s = np.maximum(-g0, opts.slack_floor)
        self.ye = np.zeros(self.me)
        self.yi = np.zeros(self.mi)
        mu = opts.mu_init
        self.zl = np.where(self.has_lb, mu / np.maximum(x - lb, 1e-8), 0.0)
        self.zu = np.where(self.has_ub, mu / np.maximum(ub - x, 1e-8), 0.0)
        self.zs = mu / self.s
        self.mu = mu
        self.nu = 1.0  # l1 penalty weight
        self.delta_last = 0.0


def _barrier_value(ws, fval, mu):
    x, lb, ub = ws.x, ws.p.lb, ws.p.ub
    val = fval
    if np.any(ws.has_lb):
        dl = (x - lb)[ws.has_lb]
        if np.any(dl <= 0):
            return np.inf
        val -= mu * np.sum(np.log(dl))
    if np.any(ws.has_ub):
        du = (ub - x)[ws.has_ub]
        if np.any(du <= 0):
            return np.inf
        val -= mu * np.sum(np.log(du))
    if len(ws.s):
        if np.any(ws.s <= 0):
            return np.inf
        val -= mu * np.sum(np.log(ws.s))
    return val


def _merit(ws, x, s, mu, nu, fval, ce, gi):
    lb, ub = ws.p.lb, ws.p.ub
    val = fval
    dl = (x - lb)[ws.has_lb]
    du = (ub - x)[ws.has_ub]
    if np.any(dl <= 0) or np.any(du <= 0) or np.any(s <= 0):
        return np.inf
    if dl.size:
        val -= mu * np.sum(np.log(dl))
    if du.size:
        val -= mu * np.sum(np.log(du))
    if s.size:
        val -= mu * np.sum(np.log(s))
    theta = np.sum(np.abs(ce)) + np.sum(np.abs(gi + s))
    return val + nu * theta


def _max_step(v, dv, tau):
    """Largest alpha <= 1 with v + alpha*dv >= (1 - tau) * v (v > 0)."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def solve_nlp(problem: NlpProblem, opts: SolverOptions | None = None, x0=None) -> NlpSolution:
    """Solve the NLP; deterministic given identical options and start."""
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    ws = _Workspace(problem, opts, x0=x0)
    n = problem.n
    lb, ub = problem.lb, problem.ub
    mu_min = opts.tol * opts.mu_min_factor

    eq_slices = _slices(ws.eqb)
    in_slices = _slices(ws.inb)

    status = "iteration_limit"
    message = ""
    it = 0
    n_small_steps = 0

    fval, grad = problem.objective(ws.x)
    ce, je = _stack_eval(ws.eqb, ws.x)
    gi, ji = _stack_eval(ws.inb, ws.x)

    for it in range(1, opts.max_iter + 1):
        x, s, mu = ws.x, ws.s, ws.mu

        dl = np.where(ws.has_lb, x - lb, 1.0)
        du = np.where(ws.has_ub, ub - x, 1.0)

        # optimality error (scaled dual infeasibility, IPOPT-style)
        r_x = grad + je.T @ ws.ye + ji.T @ ws.yi - ws.zl + ws.zu
        r_s = ws.yi - ws.zs
        # same scaling formula as kkt_residuals so the two measures agree
        n_mults = ws.me + ws.mi + int(ws.has_lb.sum() + ws.has_ub.sum())
        z_sum = np.abs(ws.ye).sum() + np.abs(ws.yi).sum() + ws.zl.sum() + ws.zu.sum()
        s_d = max(100.0, z_sum / max(1, n_mults)) / 100.0
        comp_l = np.abs(ws.zl * dl - mu)[ws.has_lb]
        comp_u = np.abs(ws.zu * du - mu)[ws.has_ub]
        comp_s = np.abs(ws.zs * s - mu) if ws.mi else np.zeros(0)
        comp0_l = np.abs(ws.zl * dl)[ws.has_lb]
        comp0_u = np.abs(ws.zu * du)[ws.has_ub]
        comp0_s = np.abs(ws.zs * s) if ws.mi else np.zeros(0)

        def _err(parts):
            return max((float(np.max(p)) if len(p) else 0.0) for p in parts)

        dual_inf = _err([np.abs(r_x), np.abs(r_s)]) / s_d
        prim_inf = _err([np.abs(ce), np.abs(gi + s)])
        e_mu = max(dual_inf, prim_inf, _err([comp_l, comp_u, comp_s]) / s_d)
        e_0 = max(dual_inf, prim_inf, _err([comp0_l, comp0_u, comp0_s]) / s_d)

        if opts.verbose:
            log.info(
                "it %3d mu %.1e f %.8e dual %.2e prim %.2e comp %.2e",
                it, mu, fval, dual_inf, prim_inf, _err([comp0_l, comp0_u, comp0_s]) / s_d,
            )

        if e_0 <= opts.tol:
            status = "optimal"
            break

        # barrier update (Fiacco-McCormick)
        while e_mu <= opts.kappa_eps * ws.mu and ws.mu > mu_min:
            ws.mu = max(ws.mu / 10.0, mu_min)
            mu = ws.mu
            comp_l = np.abs(ws.zl * dl - mu)[ws.has_lb]
            comp_u = np.abs(ws.zu * du - mu)[ws.has_ub]
            comp_s = np.abs(ws.zs * s - mu) if ws.mi else np.zeros(0)
            e_mu = max(dual_inf, prim_inf, _err([comp_l, comp_u, comp_s]) / s_d)

        # assemble condensed KKT pieces
        sig_x = np.zeros(n)
        sig_x[ws.has_lb] += (ws.zl / dl)[ws.has_lb]
        sig_x[ws.has_ub] += (ws.zu / du)[ws.has_ub]
        sig_s = ws.zs / s

        grad_phi_x = grad.copy()
        grad_phi_x[ws.has_lb] -= (mu / dl)[ws.has_lb]
        grad_phi_x[ws.has_ub] += (mu / du)[ws.has_ub]
        grad_phi_s = -mu / s if ws.mi else np.zeros(0)

        w_mat = problem.obj_hess(ws.x) if problem.obj_hess is not None else sp.csr_matrix((n, n))
        if opts.hessian == "exact":
            for b, sl in ((b, eq_slices[b.name]) for b in ws.eqb):
                if b.hess is not None:
                    w_mat = w_mat + b.hess(ws.x, ws.ye[sl])
            for b, sl in ((b, in_slices[b.name]) for b in ws.inb):
                if b.hess is not None:
                    w_mat = w_mat + b.hess(ws.x, ws.yi[sl])

        r_i = gi + s
        b_x = -grad_phi_x - je.T @ ws.ye - ji.T @ (mu / s + sig_s * r_i) if ws.mi else (
            -grad_phi_x - je.T @ ws.ye
        )
        b_e = -ce

        jtsj = (ji.T @ sp.diags(sig_s) @ ji).tocsr() if ws.mi else sp.csr_matrix((n, n))

        # inertia correction: escalate a diagonal shift until the step is a
        # descent direction for the merit function
        delta = 0.0
        gamma = 1e-10
        tau = max(opts.tau_min, 1.0 - mu)
        accepted = False
        for trial in range(30):
            h_mat = (w_mat + jtsj + sp.diags(sig_x + delta)).tocsr()
            if ws.me:
                kkt = sp.bmat([[h_mat, je.T], [je, -gamma * sp.eye(ws.me)]], format="csc")
                rhs = np.concatenate([b_x, b_e])
            else:
                kkt = h_mat.tocsc()
                rhs = b_x
            try:
                lu = spla.splu(kkt)
                sol = lu.solve(rhs)
            except RuntimeError:
                delta = max(1e-8, (10.0 * delta) if delta else max(1e-8, ws.delta_last / 3))
                continue
            if not np.all(np.isfinite(sol)):
                delta = max(1e-8, (10.0 * delta) if delta else 1e-8)
                continue
            dx = sol[:n]
            dye = sol[n:] if ws.me else np.zeros(0)
            ds = (-r_i - ji @ dx) if ws.mi else np.zeros(0)
            dyi = (-ws.yi + mu / s + sig_s * r_i + sig_s * (ji @ dx)) if ws.mi else np.zeros(0)

            theta = np.sum(np.abs(ce)) + np.sum(np.abs(r_i))
            y_norm = max(
                float(np.max(np.abs(ws.ye + dye))) if ws.me else 0.0,
                float(np.max(np.abs(ws.yi + dyi))) if ws.mi else 0.0,
            )
            ws.nu = max(ws.nu, 1.2 * y_norm + 1.0)
            d_phi = float(grad_phi_x @ dx + (grad_phi_s @ ds if ws.mi else 0.0)) - ws.nu * theta
            if d_phi >= 0.0 and float(np.abs(dx).max(initial=0.0)) > 1e-14:
                # not a descent direction for the merit: wrong inertia
                delta = max(1e-8, (10.0 * delta) if delta else max(1e-8, ws.delta_last / 3))
                continue
            accepted = True
            break
        if not accepted:
            status = "numerical_failure"
            message = "inertia correction failed"
            break
        ws.delta_last = delta

        # fraction-to-boundary limits
        alpha_max = 1.0
        if np.any(ws.has_lb):
            alpha_max = min(alpha_max, _max_step(dl[ws.has_lb], dx[ws.has_lb], tau))
        if np.any(ws.has_ub):
            alpha_max = min(alpha_max, _max_step(du[ws.has_ub], -dx[ws.has_ub], tau))
        if ws.mi:
            alpha_max = min(alpha_max, _max_step(s, ds, tau))

        dzl = np.where(ws.has_lb, mu / dl - ws.zl - (ws.zl / dl) * dx, 0.0)
        dzu = np.where(ws.has_ub, mu / du - ws.zu + (ws.zu / du) * dx, 0.0)
        dzs = (mu / s - ws.zs - sig_s * ds) if ws.mi else np.zeros(0)
        alpha_dual = 1.0
        if np.any(ws.has_lb):
            alpha_dual = min(alpha_dual, _max_step(ws.zl[ws.has_lb], dzl[ws.has_lb], tau))
        if np.any(ws.has_ub):
            alpha_dual = min(alpha_dual, _max_step(ws.zu[ws.has_ub], dzu[ws.has_ub], tau))
        if ws.mi:
            alpha_dual = min(alpha_dual, _max_step(ws.zs, dzs, tau))

        # Armijo backtracking on the merit function
        phi0 = _merit(ws, ws.x, s, mu, ws.nu, fval, ce, gi)
        alpha = alpha_max
        ls_ok = False
        while alpha >= opts.alpha_min:
            x_new = ws.x + alpha * dx
            s_new = s + alpha * ds if ws.mi else s
            f_new, g_new = problem.objective(x_new)
            ce_new, je_new = _stack_eval(ws.eqb, x_new)
            gi_new, ji_new = _stack_eval(ws.inb, x_new)
            phi_new = _merit(ws, x_new, s_new, mu, ws.nu, f_new, ce_new, gi_new)
            if np.isfinite(phi_new) and phi_new <= phi0 + opts.armijo * alpha * d_phi:
                ls_ok = True
                break
            alpha *= 0.5
        if not ls_ok:
            if prim_inf > opts.tol * 10:
                status = "infeasible_detected"
                message = f"no merit progress with constraint violation {prim_inf:.3e}"
            else:
                status = "numerical_failure"
                message = "line search failed near feasibility"
            break

        n_small_steps = n_small_steps + 1 if alpha < 1e-8 else 0
        if n_small_steps >= 5:
            if prim_inf > opts.tol * 10:
                status = "infeasible_detected"
                message = f"step collapse with constraint violation {prim_inf:.3e}"
            else:
                status = "numerical_failure"
                message = "step collapse near feasibility"
            break

        ws.x = x_new
        if ws.mi:
            ws.s = s_new
        ws.ye = ws.ye + alpha * dye
        ws.yi = ws.yi + alpha * dyi if ws.mi else ws.yi
        ws.zl = np.maximum(ws.zl + alpha_dual * dzl, 0.0)
        ws.zu = np.maximum(ws.zu + alpha_dual * dzu, 0.0)
        if ws.mi:
            ws.zs = np.maximum(ws.zs + alpha_dual * dzs, 1e-16)
        fval, grad = f_new, g_new
        ce, je = ce_new, je_new
        gi, ji = gi_new, ji_new

    duals = {}
    for b in ws.eqb:
        duals[b.name] = ws.ye[eq_slices[b.name]].copy()
    for b in ws.inb:
        duals[b.name] = ws.yi[in_slices[b.name]].copy()

    sol = NlpSolution(
        x=ws.x.copy(),
        duals=duals,
        zl=ws.zl.copy(),
        zu=ws.zu.copy(),
        objective=float(problem.objective(ws.x)[0]),
        status=status,
        kkt={},
        iterations=it,
        wall_time=time.perf_counter() - t_start,
        mu_final=ws.mu,
        message=message,
    )
    sol.kkt = kkt_residuals(problem, sol)
    return sol


def kkt_residuals(problem: NlpProblem, solution: NlpSolution) -> dict:
    """Independently re-evaluated KKT residuals at a primal-dual point.

    stationarity: scaled inf-norm of grad f + J^T lambda - zl + zu
    primal_feas:  worst equality residual / inequality violation / box violation
    complementarity: max |lambda_i * slack_i| over inequality rows and bounds
    """
    x = solution.x
    _, grad = problem.objective(x)
    r = grad - solution.zl + solution.zu
    prim = 0.0
    comp = 0.0
    n_mults = 0
    z_sum = float(solution.zl.sum() + solution.zu.sum())
    for b in problem.blocks:
        vals, jac = b.eval(x)
        lam = solution.duals[b.name]
        r = r + jac.T @ lam
        n_mults += b.m
        z_sum += float(np.abs(lam).sum())
        if b.kind == EQ:
            prim = max(prim, float(np.max(np.abs(vals))) if b.m else 0.0)
        else:
            prim = max(prim, float(np.max(vals)) if b.m else 0.0)
            comp = max(comp, float(np.max(np.abs(lam * vals))) if b.m else 0.0)
    has_lb = np.isfinite(problem.lb)
    has_ub = np.isfinite(problem.ub)
    if np.any(has_lb):
        prim = max(prim, float(np.max((problem.lb - x)[has_lb])))
        comp = max(comp, float(np.max(np.abs(solution.zl[has_lb] * (x - problem.lb)[has_lb]))))
    if np.any(has_ub):
        prim = max(prim, float(np.max((x - problem.ub)[has_ub])))
        comp = max(comp, float(np.max(np.abs(solution.zu[has_ub] * (problem.ub - x)[has_ub]))))
    n_bounds = int(has_lb.sum() + has_ub.sum())
    s_d = max(100.0, z_sum / max(1, n_mults + n_bounds)) / 100.0
    return {
        "stationarity": float(np.max(np.abs(r))) / s_d,
        "primal_feas": max(prim, 0.0),
        "complementarity": comp / s_d,
    }
