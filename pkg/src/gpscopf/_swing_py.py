"""Pure-Python Dormand-Prince 5(4) integrator for the single-machine swing
equation, mirroring the compiled kernel in ``_swing.pyx`` operation for
operation. Used automatically when the extension is not built.

State is (delta, slip) with slip = omega - omega_s, so both components stay
O(1) and the mixed absolute/relative error test is meaningful:

    d delta / dt = omega_s * slip
    d slip  / dt = pm/m - (d/m) * slip - a_e * sin(delta - theta)

with a_e = eqp0 * vm / (xd_prime * m).
"""

import math

import numpy as np

COMPILED = False

STATUS_HORIZON = 0
STATUS_DIVERGED = 1
STATUS_UNDERFLOW = 2

# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)
# quartic dense-output polynomial, columns are powers theta^1..theta^4
_P = (
    (1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0, 87487479700.0 / 32700410799.0),
    (0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0),
    (0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0, 701980252875.0 / 199316789632.0),
    (0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0),
    (0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0),
)

_MAX_STEPS = 20_000_000


def integrate_swing(
    delta0,
    slip0,
    theta,
    a_e,
    pm_over_m,
    d_over_m,
    omega_s,
    horizon,
    rtol,
    atol,
    n_samples,
    guard,
):
    """Integrate the swing equation over [0, horizon] onto a uniform grid.

    Returns (delta, slip, n_filled, status). delta/slip are length-n_samples
    arrays; entries at indices >= n_filled are unset. status is one of
    STATUS_HORIZON, STATUS_DIVERGED (first grid sample with
    |delta - delta0| > guard is included, then filled stops), or
    STATUS_UNDERFLOW.
    """
    delta_out = np.empty(n_samples, dtype=np.float64)
    slip_out = np.empty(n_samples, dtype=np.float64)
    dt_grid = horizon / (n_samples - 1)

    def f(d, s):
        return omega_s * s, pm_over_m - d_over_m * s - a_e * math.sin(d - theta)

    t = 0.0
    yd, ys = delta0, slip0
    delta_out[0] = yd
    slip_out[0] = ys
    filled = 1
    if abs(yd - delta0) > guard:  # degenerate guard (guard <= 0)
        return delta_out, slip_out, filled, STATUS_DIVERGED

    k1d, k1s = f(yd, ys)

    # initial step size: bound from the explicit Euler increment (Hairer I.7)
    sc_d = atol + rtol * abs(yd)
    sc_s = atol + rtol * abs(ys)
    d0 = math.sqrt(0.5 * ((yd / sc_d) ** 2 + (ys / sc_s) ** 2))
    d1 = math.sqrt(0.5 * ((k1d / sc_d) ** 2 + (k1s / sc_s) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1d, y1s = yd + h0 * k1d, ys + h0 * k1s
    f1d, f1s = f(y1d, y1s)
    d2 = math.sqrt(0.5 * (((f1d - k1d) / sc_d) ** 2 + ((f1s - k1s) / sc_s) ** 2)) / h0
    dmax = max(d1, d2)
    h1 = max(1e-6, h0 * 1e-3) if dmax <= 1e-15 else (0.01 / dmax) ** 0.2
    h = min(100.0 * h0, h1, horizon)

    step_count = 0
    while filled < n_samples:
        step_count += 1
        if step_count > _MAX_STEPS:
            return delta_out, slip_out, filled, STATUS_UNDERFLOW
        if h < 1e-14 * max(1.0, t):
            return delta_out, slip_out, filled, STATUS_UNDERFLOW
        if t + h > horizon:
            h = horizon - t

        k2d, k2s = f(yd + h * _A21 * k1d, ys + h * _A21 * k1s)
        k3d, k3s = f(yd + h * (_A31 * k1d + _A32 * k2d), ys + h * (_A31 * k1s + _A32 * k2s))
        k4d, k4s = f(
            yd + h * (_A41 * k1d + _A42 * k2d + _A43 * k3d),
            ys + h * (_A41 * k1s + _A42 * k2s + _A43 * k3s),
        )
        k5d, k5s = f(
            yd + h * (_A51 * k1d + _A52 * k2d + _A53 * k3d + _A54 * k4d),
            ys + h * (_A51 * k1s + _A52 * k2s + _A53 * k3s + _A54 * k4s),
        )
        k6d, k6s = f(
            yd + h * (_A61 * k1d + _A62 * k2d + _A63 * k3d + _A64 * k4d + _A65 * k5d),
            ys + h * (_A61 * k1s + _A62 * k2s + _A63 * k3s + _A64 * k4s + _A65 * k5s),
        )
        ynd = yd + h * (_B1 * k1d + _B3 * k3d + _B4 * k4d + _B5 * k5d + _B6 * k6d)
        yns = ys + h * (_B1 * k1s + _B3 * k3s + _B4 * k4s + _B5 * k5s + _B6 * k6s)
        k7d, k7s = f(ynd, yns)

        errd = h * (_E1 * k1d + _E3 * k3d + _E4 * k4d + _E5 * k5d + _E6 * k6d + _E7 * k7d)
        errs = h * (_E1 * k1s + _E3 * k3s + _E4 * k4s + _E5 * k5s + _E6 * k6s + _E7 * k7s)
        sc_d = atol + rtol * max(abs(yd), abs(ynd))
        sc_s = atol + rtol * max(abs(ys), abs(yns))
        err = math.sqrt(0.5 * ((errd / sc_d) ** 2 + (errs / sc_s) ** 2))

        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            continue

        # fill dense samples inside (t, t+h]
        t_new = t + h
        while filled < n_samples:
            tg = filled * dt_grid
            if tg > t_new + 1e-12 * max(1.0, t_new):
                break
            th = (tg - t) / h
            b1 = th * (_P[0][0] + th * (_P[0][1] + th * (_P[0][2] + th * _P[0][3])))
            b3 = th * (_P[2][0] + th * (_P[2][1] + th * (_P[2][2] + th * _P[2][3])))
            b4 = th * (_P[3][0] + th * (_P[3][1] + th * (_P[3][2] + th * _P[3][3])))
            b5 = th * (_P[4][0] + th * (_P[4][1] + th * (_P[4][2] + th * _P[4][3])))
            b6 = th * (_P[5][0] + th * (_P[5][1] + th * (_P[5][2] + th * _P[5][3])))
            b7 = th * (_P[6][0] + th * (_P[6][1] + th * (_P[6][2] + th * _P[6][3])))
            gd = yd + h * (b1 * k1d + b3 * k3d + b4 * k4d + b5 * k5d + b6 * k6d + b7 * k7d)
            gs = ys + h * (b1 * k1s + b3 * k3s + b4 * k4s + b5 * k5s + b6 * k6s + b7 * k7s)
            delta_out[filled] = gd
            slip_out[filled] = gs
            filled += 1
            if abs(gd - delta0) > guard:
                return delta_out, slip_out, filled, STATUS_DIVERGED

        t = t_new
        yd, ys = ynd, yns
        k1d, k1s = k7d, k7s  # FSAL
        if t >= horizon:
            break
        h *= min(10.0, max(0.2, 0.9 * err ** -0.2)) if err > 1e-30 else 10.0

    return delta_out, slip_out, filled, STATUS_HORIZON
