"""Bus admittance assembly and Newton-Raphson AC power flow.

The power flow serves two roles: a feasibility oracle for optimizer output
(fix the optimal voltage setpoints and injections, re-solve, compare) and
the post-contingency voltage update in the outage studies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .caseio import PQ, PV, REF, NetworkCase, case_arrays
from .errors import PowerFlowError

log = logging.getLogger(__name__)

PF_TOL = 1e-8
PF_MAX_ITER = 30


@dataclass
class AdmittanceMatrix:
    n: int
    ybus: sp.csr_matrix  # n x n complex
    # branch-end admittance blocks, one entry per in-service branch
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f: np.ndarray  # from-bus positions
    t: np.ndarray  # to-bus positions

    @property
    def yf(self) -> sp.csr_matrix:
        """nl x n matrix with If = yf @ V."""
        nl = len(self.f)
        rows = np.concatenate([np.arange(nl), np.arange(nl)])
        cols = np.concatenate([self.f, self.t])
        vals = np.concatenate([self.yff, self.yft])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nl, self.n))

    @property
    def yt(self) -> sp.csr_matrix:
        nl = len(self.f)
        rows = np.concatenate([np.arange(nl), np.arange(nl)])
        cols = np.concatenate([self.f, self.t])
        vals = np.concatenate([self.ytf, self.ytt])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nl, self.n))


@dataclass
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray  # rad, ref bus pinned to 0
    pg: np.ndarray  # p.u., per in-service generator
    qg: np.ndarray
    converged: bool
    iterations: int
    mismatch: float  # max |dS| over active equations, p.u.
    mismatch_history: list = field(default_factory=list)


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    """Assemble the pi-model bus admittance matrix with taps and shifts.

    Convention (fixed): for a branch from i to j with series admittance ys,
    total charging b and complex tap ratio A = tap * exp(j*shift) on the
    from side,

        Y[i,i] += (ys + j b/2) / tap^2        Y[i,j] += -ys / conj(A)
        Y[j,j] += (ys + j b/2)                Y[j,i] += -ys / A

    Bus shunts gs + j bs (p.u.) land on the diagonal.
    """
    a = case_arrays(case)
    ys = 1.0 / (a.r + 1j * a.x)
    bc = 1j * a.bc / 2.0
    tap = a.tap * np.exp(1j * a.shift)

    yff = (ys + bc) / (a.tap**2)
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ytt = ys + bc

    n, nl = a.n, a.nl
    rows = np.concatenate([a.f, a.f, a.t, a.t])
    cols = np.concatenate([a.f, a.t, a.f, a.t])
    vals = np.concatenate([yff, yft, ytf, ytt])
    ybus = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    ybus += sp.diags(a.gs + 1j * a.bs, format="csr")
    return AdmittanceMatrix(n=n, ybus=ybus.tocsr(), yff=yff, yft=yft, ytf=ytf, ytt=ytt, f=a.f, t=a.t)


def _dsbus_dv(ybus: sp.csr_matrix, v: np.ndarray):
    """Jacobians of the complex bus injection S = diag(V) conj(Ybus V)."""
    ibus = ybus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(v / np.abs(v))
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    return ds_dva.tocsr(), ds_dvm.tocsr(), ibus


def solve_powerflow(
    case: NetworkCase,
    ybus: AdmittanceMatrix | None = None,
    pg=None,
    vm_setpoint=None,
    qg=None,
    vm0=None,
    va0=None,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
) -> PowerFlowSolution:
    """Newton-Raphson power flow with one REF bus.

    pg (p.u.) gives active injections for every in-service generator; the
    REF bus generator absorbs the slack. Generator buses with a
    vm_setpoint entry are PV buses; when vm_setpoint is None the file
    setpoints are used. qg is only consulted for generators at pure PQ
    buses (not used in the default PV treatment). Flat start unless
    vm0/va0 are supplied. Reactive limits are not enforced (no PV->PQ
    switching).
    """
    a = case_arrays(case)
    if ybus is None:
        ybus = build_ybus(case)
    n = a.n
    pg = a.pg0 if pg is None else np.asarray(pg, dtype=float)
    vset = a.vg if vm_setpoint is None else np.asarray(vm_setpoint, dtype=float)
    qg = np.zeros(a.ng) if qg is None else np.asarray(qg, dtype=float)
    has_setpoint = np.isfinite(vset)

    bus_voltage_ctl = np.zeros(n, dtype=bool)
    bus_voltage_ctl[a.gen_bus[has_setpoint]] = True
    ref = a.ref
    bus_voltage_ctl[ref] = True
    pv = np.flatnonzero(bus_voltage_ctl & (np.arange(n) != ref))
    pq = np.flatnonzero(~bus_voltage_ctl & (np.arange(n) != ref))

    # specified injections: generation minus load (slack P free at ref)
    p_spec = -a.pd.copy()
    q_spec = -a.qd.copy()
    np.add.at(p_spec, a.gen_bus, pg)
    np.add.at(q_spec, a.gen_bus[~has_setpoint], qg[~has_setpoint])

    vm = np.ones(n) if vm0 is None else np.array(vm0, dtype=float)
    va = np.zeros(n) if va0 is None else np.array(va0, dtype=float)
    va = va - va[ref]
    for g in np.flatnonzero(has_setpoint):
        vm[a.gen_bus[g]] = vset[g]

    pvpq = np.concatenate([pv, pq])
    history = []
    iterations = 0
    for iterations in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s_inj = v * np.conj(ybus.ybus @ v)
        dp = p_spec - s_inj.real
        dq = q_spec - s_inj.imag
        f_vec = np.concatenate([dp[pvpq], dq[pq]])
        mismatch = float(np.max(np.abs(f_vec))) if len(f_vec) else 0.0
        history.append(mismatch)
        if mismatch <= tol:
            break
        if iterations == max_iter:
            return PowerFlowSolution(
                vm=vm, va=va, pg=pg, qg=np.zeros(a.ng), converged=False,
                iterations=iterations, mismatch=mismatch, mismatch_history=history,
            )
        ds_dva, ds_dvm, _ = _dsbus_dv(ybus.ybus, v)
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        try:
            dx = spla.spsolve(jac, f_vec)
        except RuntimeError as e:
            raise PowerFlowError(f"singular Jacobian at iteration {iterations}: {e}") from e
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError(f"singular Jacobian at iteration {iterations}")
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq) :]

    # realized generator injections: slack P at ref, Q shared at controlled buses
    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(ybus.ybus @ v)
    pg_out = pg.astype(float).copy()
    qg_out = qg.astype(float).copy()
    for b in np.flatnonzero(bus_voltage_ctl):
        gens_here = np.flatnonzero(a.gen_bus == b)
        if len(gens_here) == 0:
            continue  # ref bus without a generator: slack is purely notional
        ctl_here = gens_here[has_setpoint[gens_here]]
        share = ctl_here if len(ctl_here) else gens_here
        q_total = s_inj.imag[b] + a.qd[b] - qg[gens_here[~np.isin(gens_here, share)]].sum()
        qg_out[share] = q_total / len(share)
        if b == ref:
            p_total = s_inj.real[b] + a.pd[b]
            others = pg[gens_here[1:]].sum()
            pg_out[gens_here[0]] = p_total - others
    return PowerFlowSolution(
        vm=vm, va=va, pg=pg_out, qg=qg_out, converged=True,
        iterations=iterations, mismatch=history[-1], mismatch_history=history,
    )


def branch_flows(case: NetworkCase, vm, va, ybus: AdmittanceMatrix | None = None):
    """Complex power entering each in-service branch at both ends (p.u.)."""
    if ybus is None:
        ybus = build_ybus(case)
    v = np.asarray(vm) * np.exp(1j * np.asarray(va))
    vf, vt = v[ybus.f], v[ybus.t]
    s_from = vf * np.conj(ybus.yff * vf + ybus.yft * vt)
    s_to = vt * np.conj(ybus.ytf * vf + ybus.ytt * vt)
    return s_from, s_to
