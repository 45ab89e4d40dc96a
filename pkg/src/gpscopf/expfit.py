"""Exponential envelope surrogate for rotor-angle trajectories.

The deviation of the rotor angle from its settled value is summarized as
amplitude * exp(rate * t); the sign of the fitted rate separates decaying
(stable) from growing (unstable) responses. Fitting the envelope rather
than the raw oscillation keeps the rate's sign meaningful: a raw fit to an
oscillation around a nonzero mean is pulled toward rate 0 regardless of
damping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory

LM_LAMBDA0 = 1e-3
LM_MAX_ITER = 200
LM_GRAD_TOL = 1e-10
BETA_LIMIT = 60.0  # rates beyond this are unresolvable at the sampling grid


@dataclass(frozen=True)
class ExpFit:
    alpha: float  # rad, envelope amplitude (>= 0)
    beta: float  # 1/s, growth (>0) or decay (<0) rate
    rmse: float  # rad
    n_points: int


def envelope(traj: Trajectory):
    """Peak series (t_k, a_k) of the deviation |delta(t) - delta_bar|.

    delta_bar is the mean of the final 10% of samples, or delta(0) for
    diverged trajectories (no settled tail exists). Local maxima include
    the boundary samples; if fewer than two maxima exist (monotone
    deviation), the full deviation series is returned.
    """
    delta = np.asarray(traj.delta, dtype=float)
    t = np.asarray(traj.t, dtype=float)
    n = len(delta)
    if n == 0:
        return np.array([0.0]), np.array([0.0])
    if np.all(delta == delta[0]):
        return np.array([0.0]), np.array([0.0])

    tail = max(1, n // 10)
    tail_mean = float(np.mean(delta[-tail:]))
    prev_mean = float(np.mean(delta[-2 * tail : -tail])) if n >= 2 * tail else tail_mean
    settled = abs(tail_mean - prev_mean) <= 1e-2
    if traj.terminated_early or not settled:
        # no settled tail exists (guard tripped, or still drifting at the
        # horizon): measure deviation from the initial angle instead
        ref = delta[0]
    else:
        ref = tail_mean
    dev = np.abs(delta - ref)

    if n < 3:
        return t, dev
    interior = (dev[1:-1] > dev[:-2]) & (dev[1:-1] >= dev[2:])
    keep = np.zeros(n, dtype=bool)
    keep[1:-1] = interior
    keep[0] = dev[0] > dev[1]
    keep[-1] = dev[-1] > dev[-2]
    if np.count_nonzero(keep) < 2:
        return t, dev
    return t[keep], dev[keep]


def fit_envelope_series(t, a) -> ExpFit:
    """Levenberg-Marquardt fit of amplitude*exp(rate*t) to a peak series.

    Initialized by log-linear regression on the strictly positive
    ordinates; damping starts at 1e-3, x10 on a rejected step, /10 on an
    accepted one; stops when the gradient norm drops below 1e-10 or after
    200 iterations.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(a)
    # envelopes below integrator noise carry no usable sign information
    if not np.any(a > 0) or float(np.max(a)) < 1e-7:
        return ExpFit(alpha=0.0, beta=0.0, rmse=0.0, n_points=n)
    # six decades below the peak is integrator noise, not envelope; keeping
    # it would let the rate estimate run away on fast monotone decays
    floor = 1e-6 * float(np.max(a))
    keep = a >= floor
    t, a = t[keep], a[keep]
    pos = a > 0
    if np.count_nonzero(pos) == 1:
        alpha0, beta0 = float(a[pos][0]), 0.0
    else:
        coef = np.polyfit(t[pos], np.log(a[pos]), 1)
        beta0, alpha0 = float(coef[0]), float(math.exp(coef[1]))
    beta0 = float(np.clip(beta0, -BETA_LIMIT, BETA_LIMIT))

    def residual(alpha, beta):
        z = np.clip(beta * t, -700.0, 700.0)
        model = alpha * np.exp(z)
        return a - model, model

    alpha, beta = alpha0, beta0
    r, model = residual(alpha, beta)
    cost = float(r @ r)
    lam = LM_LAMBDA0
    for _ in range(LM_MAX_ITER):
        # J columns: d r / d alpha, d r / d beta
        j_alpha = -model / alpha if alpha != 0 else -np.exp(np.clip(beta * t, -700, 700))
        j_beta = -t * model
        g0 = float(j_alpha @ r)
        g1 = float(j_beta @ r)
        if max(abs(g0), abs(g1)) <= LM_GRAD_TOL:
            break
        h00 = float(j_alpha @ j_alpha)
        h11 = float(j_beta @ j_beta)
        h01 = float(j_alpha @ j_beta)
        # Marquardt scaling keeps the two very different parameter scales usable
        m00 = h00 * (1.0 + lam) + 1e-300
        m11 = h11 * (1.0 + lam) + 1e-300
        det = m00 * m11 - h01 * h01
        if det <= 0 or not math.isfinite(det):
            lam *= 10.0
            continue
        step_a = (-g0 * m11 + g1 * h01) / det
        step_b = (-g1 * m00 + g0 * h01) / det
        na, nb = alpha + step_a, beta + step_b
        if na < 0 or abs(nb) > BETA_LIMIT or not math.isfinite(na) or not math.isfinite(nb):
            lam *= 10.0
            continue
        nr, nmodel = residual(na, nb)
        ncost = float(nr @ nr)
        if not math.isfinite(ncost):
            lam *= 10.0
            continue
        if ncost < cost:
            alpha, beta, r, model, cost = na, nb, nr, nmodel, ncost
            lam = max(lam / 10.0, 1e-15)
            if abs(step_a) <= 1e-15 * max(1.0, abs(alpha)) and abs(step_b) <= 1e-15 * max(
                1.0, abs(beta)
            ):
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break

    return ExpFit(
        alpha=float(alpha),
        beta=float(beta),
        rmse=float(math.sqrt(cost / len(a))),
        n_points=int(len(a)),
    )


def fit_exponential(traj: Trajectory) -> ExpFit:
    """Fit the exponential envelope surrogate to a trajectory."""
    t, a = envelope(traj)
    return fit_envelope_series(t, a)
