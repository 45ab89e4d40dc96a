"""Classical-machine rotor dynamics: steady-state initialization, swing
integration against a frozen terminal voltage, and stability labeling.

Each generator is a second-order system in (rotor angle, rotor speed) with
constant internal EMF behind the transient reactance. The terminal voltage
phasor is held fixed for the whole trajectory, so machines integrate
independently of each other and of the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .caseio import DynParams
from .errors import InitError, SimulationError

try:
    from . import _swing as _kernel
except ImportError:  # extension not built; same algorithm, ~30x slower
    from . import _swing_py as _kernel

COMPILED_KERNEL = bool(_kernel.COMPILED)

DIVERGENCE_GUARD = 10.0 * math.pi
DEFAULT_HORIZON = 10.0
DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
MIN_SAMPLES = 500


@dataclass(frozen=True)
class GenState:
    delta: float  # rad
    omega: float  # rad/s
    eq_prime: float  # p.u., constant during integration
    ed_prime: float = 0.0  # classical model


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray  # s, t[0] == 0, strictly increasing
    delta: np.ndarray  # rad
    omega: np.ndarray  # rad/s
    terminated_early: bool
    reason: str  # "diverged" or "horizon"
    vm: float  # boundary |V_g|, p.u.
    va: float  # boundary angle, rad
    horizon: float  # requested horizon, s


@dataclass(frozen=True)
class StabilityLabel:
    stable: bool
    criterion: str  # "bounded", "pole_slip" (diverged or angle threshold), "horizon_growth"


def init_state(p: float, q: float, vm: float, va: float, dyn: DynParams):
    """Solve the steady-state power balance for (delta0, eqp0, omega0).

    The two balance equations

        eqp * vm * sin(delta0 - va) / xd' = p
        (eqp * vm * cos(delta0 - va) - vm^2) / xd' = q

    have the closed-form solution used here; the branch with
    delta0 - va in (-pi/2, pi/2] is the stable equilibrium.
    """
    if vm <= 0:
        raise InitError(f"terminal voltage must be positive, got vm={vm}")
    xdp = dyn.xd_prime
    s_part = p * xdp  # eqp*vm*sin
    c_part = q * xdp + vm * vm  # eqp*vm*cos
    eqp_vm = math.hypot(s_part, c_part)
    eqp0 = eqp_vm / vm
    if eqp0 <= 0:
        raise InitError(f"initialization yields non-positive EMF eqp0={eqp0}")
    delta0 = va + math.atan2(s_part, c_part)
    return delta0, eqp0, dyn.omega_s


def init_residuals(p, q, vm, va, dyn, delta0, eqp0):
    """Residuals of the two steady-state balance equations."""
    xdp = dyn.xd_prime
    r_p = eqp0 * vm * math.sin(delta0 - va) / xdp - p
    r_q = (eqp0 * vm * math.cos(delta0 - va) - vm * vm) / xdp - q
    return r_p, r_q


def rhs(state: GenState, dyn: DynParams, vm: float, va: float):
    """Time derivatives (d delta/dt, d omega/dt) of the reduced model."""
    slip = state.omega - dyn.omega_s
    d_delta = dyn.omega_s * slip
    d_omega = (dyn.pm - dyn.d * slip) / dyn.m - (
        state.eq_prime * vm / (dyn.xd_prime * dyn.m)
    ) * math.sin(state.delta - va)
    return d_delta, d_omega


def simulate(
    p: float,
    q: float,
    vm: float,
    va: float,
    dyn: DynParams,
    horizon: float = DEFAULT_HORIZON,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    n_samples: int = MIN_SAMPLES,
) -> Trajectory:
    """Integrate the swing equation from the steady-state initialization.

    Adaptive Dormand-Prince 5(4) with dense output on a uniform grid of
    n_samples (>= 500) points; stops early once |delta - delta(0)| exceeds
    the 10*pi divergence guard.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    n_samples = max(int(n_samples), MIN_SAMPLES)
    delta0, eqp0, omega0 = init_state(p, q, vm, va, dyn)

    a_e = eqp0 * vm / (dyn.xd_prime * dyn.m)
    delta, slip, n_filled, status = _kernel.integrate_swing(
        delta0,
        omega0 - dyn.omega_s,
        va,
        a_e,
        dyn.pm / dyn.m,
        dyn.d / dyn.m,
        dyn.omega_s,
        horizon,
        rtol,
        atol,
        n_samples,
        DIVERGENCE_GUARD,
    )
    if status == _kernel.STATUS_UNDERFLOW:
        t_stop = (n_filled - 1) * horizon / (n_samples - 1)
        raise SimulationError(f"step size underflow near t={t_stop:.6g} s")

    t = np.linspace(0.0, horizon, n_samples)[:n_filled]
    diverged = status == _kernel.STATUS_DIVERGED
    return Trajectory(
        t=t,
        delta=delta[:n_filled],
        omega=dyn.omega_s + slip[:n_filled],
        terminated_early=diverged,
        reason="diverged" if diverged else "horizon",
        vm=vm,
        va=va,
        horizon=horizon,
    )


def classify(traj: Trajectory, dyn: DynParams) -> StabilityLabel:
    """Label a trajectory stable/unstable.

    Unstable when the integration diverged, the rotor angle crossed
    delta_max, or the deviation amplitude in the last 20% of the horizon
    exceeds the first-20% amplitude by a factor >= 1.5 (sustained growth
    that has not yet tripped the other criteria).
    """
    delta = np.asarray(traj.delta)
    if traj.terminated_early:
        return StabilityLabel(stable=False, criterion="pole_slip")
    if float(np.max(delta)) > dyn.delta_max:
        return StabilityLabel(stable=False, criterion="pole_slip")

    n = len(delta)
    w = max(2, n // 5)
    dev = np.abs(delta - float(np.mean(delta)))
    early = float(np.max(dev[:w]))
    late = float(np.max(dev[-w:]))
    # 1e-4 rad floor: integrator noise at rest is ~1e-7, genuine swings are >= 1e-2
    if late >= 1.5 * early and late > 1e-4:
        return StabilityLabel(stable=False, criterion="horizon_growth")
    return StabilityLabel(stable=True, criterion="bounded")
