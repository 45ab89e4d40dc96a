"""Steady-state ACOPF assembled as a smooth NLP in polar voltage coordinates.

Decision vector: [vm (all buses); va (all buses); pg; qg (in-service
generators)], everything in p.u./rad. Bus balance and the reference angle
are equalities; squared apparent-power flow limits (both branch ends) and
linear angle-difference limits are inequalities. Cost coefficients apply
to MW, so the objective converts p.u. dispatch through base_mva.

Jacobians and the multiplier-weighted constraint Hessians are analytic,
using the complex-matrix identities for S = diag(V) conj(Y V) in polar
form; the Hessian callbacks let the interior-point solver take exact
Newton steps on the AC constraints.
"""

from __future__ import annotations

import logging
from types import SimpleNamespace

import numpy as np
import scipy.sparse as sp

from .caseio import NetworkCase, case_arrays, validate_case
from .errors import CaseError
from .nlp import EQ, INEQ, ConstraintBlock, NlpProblem
from .powerflow import build_ybus

log = logging.getLogger(__name__)


def _polar_hessian(w_mat: sp.spmatrix, vm: np.ndarray, n: int, n_x: int) -> sp.csr_matrix:
    """Hessian of Re(sum of W entries) wrt (vm, va) for W_ik proportional to
    vm_i vm_k exp(j(va_i - va_k)).

    Returns an n_x x n_x matrix with the (vm, va) block at the top-left
    corner of the decision vector layout.
    """
    w_mat = w_mat.tocsr()
    wt = w_mat.T.tocsr()
    rs = np.asarray(w_mat.sum(axis=1)).ravel()
    cs = np.asarray(w_mat.sum(axis=0)).ravel()
    inv_m = sp.diags(1.0 / vm)

    h_tt = (w_mat + wt - sp.diags(rs + cs)).real
    h_tm = ((1j * (w_mat - wt + sp.diags(rs - cs))) @ inv_m).real
    h_mm = (inv_m @ (w_mat + wt) @ inv_m).real

    blocks = sp.bmat([[h_mm, h_tm.T], [h_tm, h_tt]], format="coo")
    out = sp.coo_matrix(
        (blocks.data, (blocks.row, blocks.col)), shape=(n_x, n_x)
    )
    return out.tocsr()


class _NetState:
    """Per-x cache of voltage-dependent network quantities."""

    def __init__(self, owner):
        self.owner = owner
        self.key = None

    def at(self, x):
        key = x.tobytes()
        if key != self.key:
            o = self.owner
            n = o.n
            vm = x[:n]
            va = x[n : 2 * n]
            v = vm * np.exp(1j * va)
            ibus = o.ybus @ v
            diag_v = sp.diags(v)
            diag_i = sp.diags(ibus)
            diag_vn = sp.diags(v / vm)
            self.v = v
            self.vm = vm
            self.s_bus = v * np.conj(ibus)
            self.ds_dva = (1j * diag_v @ np.conj(diag_i - o.ybus @ diag_v)).tocsr()
            self.ds_dvm = (diag_v @ np.conj(o.ybus @ diag_vn) + np.conj(diag_i) @ diag_vn).tocsr()
            if o.nlim:
                i_f = o.yf_lim @ v
                v_f = o.cf_lim @ v
                self.s_f = v_f * np.conj(i_f)
                diag_vf = sp.diags(v_f)
                diag_if = sp.diags(i_f)
                self.dsf_dva = (
                    diag_vf @ np.conj(o.yf_lim @ (1j * diag_v)) + np.conj(diag_if) @ (o.cf_lim @ (1j * diag_v))
                ).tocsr()
                self.dsf_dvm = (
                    diag_vf @ np.conj(o.yf_lim @ diag_vn) + np.conj(diag_if) @ (o.cf_lim @ diag_vn)
                ).tocsr()
            self.key = key
        return self


def assemble_acopf(case: NetworkCase) -> NlpProblem:
    """Build the ACOPF NlpProblem for a validated, connected case."""
    violations = validate_case(case)
    if violations:
        raise CaseError(
            "case fails validation: " + "; ".join(str(v) for v in violations[:5])
        )
    a = case_arrays(case)
    adm = build_ybus(case)
    n, ng, nl = a.n, a.ng, a.nl
    n_x = 2 * n + 2 * ng
    base = a.base_mva

    off = SimpleNamespace(vm=0, va=n, pg=2 * n, qg=2 * n + ng, n=n, ng=ng, n_x=n_x)

    # generator-to-bus incidence
    cg = sp.csr_matrix(
        (np.ones(ng), (a.gen_bus, np.arange(ng))), shape=(n, ng)
    )

    lb = np.concatenate([a.vmin, np.full(n, -np.inf), a.pmin, a.qmin])
    ub = np.concatenate([a.vmax, np.full(n, np.inf), a.pmax, a.qmax])
    x0 = np.concatenate(
        [(a.vmin + a.vmax) / 2, np.zeros(n), (a.pmin + a.pmax) / 2, (a.qmin + a.qmax) / 2]
    )

    c2, c1, c0 = a.c2, a.c1, a.c0

    def objective(x):
        pg_mw = x[off.pg : off.pg + ng] * base
        val = float(np.sum(c2 * pg_mw**2 + c1 * pg_mw + c0))
        grad = np.zeros(n_x)
        grad[off.pg : off.pg + ng] = (2.0 * c2 * pg_mw + c1) * base
        return val, grad

    hess_diag = np.zeros(n_x)
    hess_diag[off.pg : off.pg + ng] = 2.0 * c2 * base**2
    obj_hess_mat = sp.diags(hess_diag, format="csr")

    def obj_hess(x):
        return obj_hess_mat

    var_names = (
        [f"vm[{b.id}]" for b in case.buses]
        + [f"va[{b.id}]" for b in case.buses]
        + [f"pg[{i}]" for i in a.gen_pos]
        + [f"qg[{i}]" for i in a.gen_pos]
    )

    problem = NlpProblem(n_x, lb, ub, x0, objective, obj_hess=obj_hess, var_names=var_names)

    owner = SimpleNamespace(n=n, ybus=adm.ybus, nlim=0)
    state = _NetState(owner)

    # --- bus balance: S(V) + S_d - Cg S_g = 0, split into P then Q rows
    zeros_pq = sp.csr_matrix((n, ng))

    def eval_balance(x):
        st = state.at(x)
        pg = x[off.pg : off.pg + ng]
        qg = x[off.qg : off.qg + ng]
        res_p = st.s_bus.real + a.pd - cg @ pg
        res_q = st.s_bus.imag + a.qd - cg @ qg
        jac = sp.bmat(
            [
                [st.ds_dvm.real, st.ds_dva.real, -cg, zeros_pq],
                [st.ds_dvm.imag, st.ds_dva.imag, zeros_pq, -cg],
            ],
            format="csr",
        )
        return np.concatenate([res_p, res_q]), jac

    def hess_balance(x, lam):
        st = state.at(x)
        c = lam[:n] - 1j * lam[n:]
        w_mat = sp.diags(c * st.v) @ np.conj(owner.ybus) @ sp.diags(np.conj(st.v))
        return _polar_hessian(w_mat, st.vm, n, n_x)

    problem.add_block(
        ConstraintBlock(
            name="balance",
            kind=EQ,
            m=2 * n,
            eval=eval_balance,
            hess=hess_balance,
            row_names=[f"P[{b.id}]" for b in case.buses] + [f"Q[{b.id}]" for b in case.buses],
        )
    )

    # --- reference angle
    j_ref = sp.csr_matrix(
        (np.array([1.0]), (np.array([0]), np.array([off.va + a.ref]))), shape=(1, n_x)
    )

    def eval_ref(x):
        return np.array([x[off.va + a.ref]]), j_ref

    problem.add_block(
        ConstraintBlock(name="ref_angle", kind=EQ, m=1, eval=eval_ref, row_names=["va_ref"])
    )

    # --- apparent-power flow limits, from and to ends, squared form.
    # rate_a == 0 means unlimited (row omitted).
    lim = np.flatnonzero(a.rate_a > 0)
    nlim = len(lim)
    if nlim:
        rate2 = a.rate_a[lim] ** 2
        for end in ("from", "to"):
            if end == "from":
                ends = a.f[lim]
                y_rows_v = np.concatenate([adm.yff[lim], adm.yft[lim]])
            else:
                ends = a.t[lim]
                y_rows_v = np.concatenate([adm.ytf[lim], adm.ytt[lim]])
            rows = np.concatenate([np.arange(nlim), np.arange(nlim)])
            cols = np.concatenate([a.f[lim], a.t[lim]])
            yf_lim = sp.csr_matrix((y_rows_v, (rows, cols)), shape=(nlim, n))
            cf_lim = sp.csr_matrix(
                (np.ones(nlim), (np.arange(nlim), ends)), shape=(nlim, n)
            )
            end_owner = SimpleNamespace(n=n, ybus=adm.ybus, nlim=nlim, yf_lim=yf_lim, cf_lim=cf_lim)
            end_state = _NetState(end_owner)

            def eval_flow(x, _st=end_state, _r2=rate2):
                st = _st.at(x)
                vals = st.s_f.real**2 + st.s_f.imag**2 - _r2
                d_p = sp.diags(2.0 * st.s_f.real)
                d_q = sp.diags(2.0 * st.s_f.imag)
                j_vm = d_p @ st.dsf_dvm.real + d_q @ st.dsf_dvm.imag
                j_va = d_p @ st.dsf_dva.real + d_q @ st.dsf_dva.imag
                jac = sp.bmat(
                    [[j_vm, j_va, sp.csr_matrix((nlim, 2 * ng))]], format="csr"
                )
                return vals, jac

            def hess_flow(x, lam, _st=end_state, _yf=yf_lim, _cf=cf_lim):
                st = _st.at(x)
                # Gauss-Newton part: 2 J_Pf' z J_Pf + 2 J_Qf' z J_Qf
                d_l = sp.diags(2.0 * lam)
                re_vm, im_vm = st.dsf_dvm.real, st.dsf_dvm.imag
                re_va, im_va = st.dsf_dva.real, st.dsf_dva.imag
                gn_mm = re_vm.T @ d_l @ re_vm + im_vm.T @ d_l @ im_vm
                gn_ma = re_vm.T @ d_l @ re_va + im_vm.T @ d_l @ im_va
                gn_aa = re_va.T @ d_l @ re_va + im_va.T @ d_l @ im_va
                gn = sp.bmat([[gn_mm, gn_ma], [gn_ma.T, gn_aa]], format="coo")
                gn_full = sp.coo_matrix((gn.data, (gn.row, gn.col)), shape=(n_x, n_x)).tocsr()
                # curvature of 2 sum_b lam_b (Pf dd Pf + Qf dd Qf)
                c_flow = 2.0 * lam * np.conj(st.s_f)
                w_mat = (
                    sp.diags(st.v) @ _cf.T @ sp.diags(c_flow) @ np.conj(_yf) @ sp.diags(np.conj(st.v))
                )
                return gn_full + _polar_hessian(w_mat, st.vm, n, n_x)

            problem.add_block(
                ConstraintBlock(
                    name=f"flow_{end}",
                    kind=INEQ,
                    m=nlim,
                    eval=eval_flow,
                    hess=hess_flow,
                    row_names=[
                        f"S{end[0]}[{case.branches[a.branch_pos[b]].from_bus}-"
                        f"{case.branches[a.branch_pos[b]].to_bus}]"
                        for b in lim
                    ],
                )
            )

    # --- angle-difference limits, two linear rows per in-service branch
    if nl:
        rows = np.repeat(np.arange(2 * nl), 2)
        cols = np.concatenate(
            [np.stack([off.va + a.f, off.va + a.t], axis=1).ravel()] * 2
        )
        vals = np.concatenate(
            [np.tile([1.0, -1.0], nl), np.tile([-1.0, 1.0], nl)]
        )
        j_ang = sp.csr_matrix((vals, (rows, cols)), shape=(2 * nl, n_x))
        ang_hi = np.concatenate([a.angmax, -a.angmin])

        def eval_angle(x):
            d = x[off.va + a.f] - x[off.va + a.t]
            return np.concatenate([d, -d]) - ang_hi, j_ang

        problem.add_block(
            ConstraintBlock(
                name="angle_diff",
                kind=INEQ,
                m=2 * nl,
                eval=eval_angle,
                row_names=[f"ang_hi[{i}]" for i in a.branch_pos]
                + [f"ang_lo[{i}]" for i in a.branch_pos],
            )
        )

    problem.meta = SimpleNamespace(case=case, arrays=a, ybus=adm, off=off)
    return problem


def split_x(problem: NlpProblem, x: np.ndarray):
    """(vm, va, pg, qg) views of an ACOPF decision vector."""
    off = problem.meta.off
    return (
        x[off.vm : off.vm + off.n],
        x[off.va : off.va + off.n],
        x[off.pg : off.pg + off.ng],
        x[off.qg : off.qg + off.ng],
    )
