# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Dormand-Prince 5(4) kernel for the single-machine swing equation.

Interface and arithmetic mirror the pure-Python twin in ``_swing_py.py``;
see that module for the state convention and status codes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sin, sqrt, pow

cnp.import_array()

COMPILED = True

STATUS_HORIZON = 0
STATUS_DIVERGED = 1
STATUS_UNDERFLOW = 2

cdef double _C2 = 1.0 / 5.0, _C3 = 3.0 / 10.0, _C4 = 4.0 / 5.0, _C5 = 8.0 / 9.0
cdef double _A21 = 1.0 / 5.0
cdef double _A31 = 3.0 / 40.0, _A32 = 9.0 / 40.0
cdef double _A41 = 44.0 / 45.0, _A42 = -56.0 / 15.0, _A43 = 32.0 / 9.0
cdef double _A51 = 19372.0 / 6561.0, _A52 = -25360.0 / 2187.0
cdef double _A53 = 64448.0 / 6561.0, _A54 = -212.0 / 729.0
cdef double _A61 = 9017.0 / 3168.0, _A62 = -355.0 / 33.0, _A63 = 46732.0 / 5247.0
cdef double _A64 = 49.0 / 176.0, _A65 = -5103.0 / 18656.0
cdef double _B1 = 35.0 / 384.0, _B3 = 500.0 / 1113.0, _B4 = 125.0 / 192.0
cdef double _B5 = -2187.0 / 6784.0, _B6 = 11.0 / 84.0
cdef double _E1 = 71.0 / 57600.0, _E3 = -71.0 / 16695.0, _E4 = 71.0 / 1920.0
cdef double _E5 = -17253.0 / 339200.0, _E6 = 22.0 / 525.0, _E7 = -1.0 / 40.0

cdef double _P00 = 1.0
cdef double _P01 = -8048581381.0 / 2820520608.0
cdef double _P02 = 8663915743.0 / 2820520608.0
cdef double _P03 = -12715105075.0 / 11282082432.0
cdef double _P20 = 0.0
cdef double _P21 = 131558114200.0 / 32700410799.0
cdef double _P22 = -68118460800.0 / 10900136933.0
cdef double _P23 = 87487479700.0 / 32700410799.0
cdef double _P30 = 0.0
cdef double _P31 = -1754552775.0 / 470086768.0
cdef double _P32 = 14199869525.0 / 1410260304.0
cdef double _P33 = -10690763975.0 / 1880347072.0
cdef double _P40 = 0.0
cdef double _P41 = 127303824393.0 / 49829197408.0
cdef double _P42 = -318862633887.0 / 49829197408.0
cdef double _P43 = 701980252875.0 / 199316789632.0
cdef double _P50 = 0.0
cdef double _P51 = -282668133.0 / 205662961.0
cdef double _P52 = 2019193451.0 / 616988883.0
cdef double _P53 = -1453857185.0 / 822651844.0
cdef double _P60 = 0.0
cdef double _P61 = 40617522.0 / 29380423.0
cdef double _P62 = -110615467.0 / 29380423.0
cdef double _P63 = 69997945.0 / 29380423.0

cdef long _MAX_STEPS = 20_000_000


cdef inline double _fmax(double a, double b) noexcept nogil:
    return a if a > b else b

cdef inline double _fmin(double a, double b) noexcept nogil:
    return a if a < b else b


def integrate_swing(
    double delta0,
    double slip0,
    double theta,
    double a_e,
    double pm_over_m,
    double d_over_m,
    double omega_s,
    double horizon,
    double rtol,
    double atol,
    int n_samples,
    double guard,
):
    """Compiled counterpart of ``_swing_py.integrate_swing``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] delta_out = np.empty(n_samples, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] slip_out = np.empty(n_samples, dtype=np.float64)
    cdef double[:] dout = delta_out
    cdef double[:] sout = slip_out
    cdef double dt_grid = horizon / (n_samples - 1)

    cdef double t = 0.0
    cdef double yd = delta0, ys = slip0
    cdef double ynd, yns
    cdef double k1d, k1s, k2d, k2s, k3d, k3s, k4d, k4s, k5d, k5s, k6d, k6s, k7d, k7s
    cdef double errd, errs, err, sc_d, sc_s
    cdef double d0, d1, d2, dmax, h0, h1, h, y1d, y1s, f1d, f1s
    cdef double t_new, tg, th, b1, b3, b4, b5, b6, b7, gd, gs
    cdef int filled = 1
    cdef long step_count = 0

    dout[0] = yd
    sout[0] = ys
    if fabs(yd - delta0) > guard:
        return delta_out, slip_out, filled, STATUS_DIVERGED

    k1d = omega_s * ys
    k1s = pm_over_m - d_over_m * ys - a_e * sin(yd - theta)

    sc_d = atol + rtol * fabs(yd)
    sc_s = atol + rtol * fabs(ys)
    d0 = sqrt(0.5 * ((yd / sc_d) ** 2 + (ys / sc_s) ** 2))
    d1 = sqrt(0.5 * ((k1d / sc_d) ** 2 + (k1s / sc_s) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1d = yd + h0 * k1d
    y1s = ys + h0 * k1s
    f1d = omega_s * y1s
    f1s = pm_over_m - d_over_m * y1s - a_e * sin(y1d - theta)
    d2 = sqrt(0.5 * (((f1d - k1d) / sc_d) ** 2 + ((f1s - k1s) / sc_s) ** 2)) / h0
    dmax = _fmax(d1, d2)
    h1 = _fmax(1e-6, h0 * 1e-3) if dmax <= 1e-15 else pow(0.01 / dmax, 0.2)
    h = _fmin(_fmin(100.0 * h0, h1), horizon)

    while filled < n_samples:
        step_count += 1
        if step_count > _MAX_STEPS:
            return delta_out, slip_out, filled, STATUS_UNDERFLOW
        if h < 1e-14 * _fmax(1.0, t):
            return delta_out, slip_out, filled, STATUS_UNDERFLOW
        if t + h > horizon:
            h = horizon - t

        k2d = omega_s * (ys + h * _A21 * k1s)
        k2s = pm_over_m - d_over_m * (ys + h * _A21 * k1s) - a_e * sin(yd + h * _A21 * k1d - theta)
        k3d = omega_s * (ys + h * (_A31 * k1s + _A32 * k2s))
        k3s = (
            pm_over_m
            - d_over_m * (ys + h * (_A31 * k1s + _A32 * k2s))
            - a_e * sin(yd + h * (_A31 * k1d + _A32 * k2d) - theta)
        )
        k4d = omega_s * (ys + h * (_A41 * k1s + _A42 * k2s + _A43 * k3s))
        k4s = (
            pm_over_m
            - d_over_m * (ys + h * (_A41 * k1s + _A42 * k2s + _A43 * k3s))
            - a_e * sin(yd + h * (_A41 * k1d + _A42 * k2d + _A43 * k3d) - theta)
        )
        k5d = omega_s * (ys + h * (_A51 * k1s + _A52 * k2s + _A53 * k3s + _A54 * k4s))
        k5s = (
            pm_over_m
            - d_over_m * (ys + h * (_A51 * k1s + _A52 * k2s + _A53 * k3s + _A54 * k4s))
            - a_e * sin(yd + h * (_A51 * k1d + _A52 * k2d + _A53 * k3d + _A54 * k4d) - theta)
        )
        k6d = omega_s * (ys + h * (_A61 * k1s + _A62 * k2s + _A63 * k3s + _A64 * k4s + _A65 * k5s))
        k6s = (
            pm_over_m
            - d_over_m * (ys + h * (_A61 * k1s + _A62 * k2s + _A63 * k3s + _A64 * k4s + _A65 * k5s))
            - a_e * sin(yd + h * (_A61 * k1d + _A62 * k2d + _A63 * k3d + _A64 * k4d + _A65 * k5d) - theta)
        )
        ynd = yd + h * (_B1 * k1d + _B3 * k3d + _B4 * k4d + _B5 * k5d + _B6 * k6d)
        yns = ys + h * (_B1 * k1s + _B3 * k3s + _B4 * k4s + _B5 * k5s + _B6 * k6s)
        k7d = omega_s * yns
        k7s = pm_over_m - d_over_m * yns - a_e * sin(ynd - theta)

        errd = h * (_E1 * k1d + _E3 * k3d + _E4 * k4d + _E5 * k5d + _E6 * k6d + _E7 * k7d)
        errs = h * (_E1 * k1s + _E3 * k3s + _E4 * k4s + _E5 * k5s + _E6 * k6s + _E7 * k7s)
        sc_d = atol + rtol * _fmax(fabs(yd), fabs(ynd))
        sc_s = atol + rtol * _fmax(fabs(ys), fabs(yns))
        err = sqrt(0.5 * ((errd / sc_d) ** 2 + (errs / sc_s) ** 2))

        if err > 1.0:
            h *= _fmax(0.2, 0.9 * pow(err, -0.2))
            continue

        t_new = t + h
        while filled < n_samples:
            tg = filled * dt_grid
            if tg > t_new + 1e-12 * _fmax(1.0, t_new):
                break
            th = (tg - t) / h
            b1 = th * (_P00 + th * (_P01 + th * (_P02 + th * _P03)))
            b3 = th * (_P20 + th * (_P21 + th * (_P22 + th * _P23)))
            b4 = th * (_P30 + th * (_P31 + th * (_P32 + th * _P33)))
            b5 = th * (_P40 + th * (_P41 + th * (_P42 + th * _P43)))
            b6 = th * (_P50 + th * (_P51 + th * (_P52 + th * _P53)))
            b7 = th * (_P60 + th * (_P61 + th * (_P62 + th * _P63)))
            gd = yd + h * (b1 * k1d + b3 * k3d + b4 * k4d + b5 * k5d + b6 * k6d + b7 * k7d)
            gs = ys + h * (b1 * k1s + b3 * k3s + b4 * k4s + b5 * k5s + b6 * k6s + b7 * k7s)
            dout[filled] = gd
            sout[filled] = gs
            filled += 1
            if fabs(gd - delta0) > guard:
                return delta_out, slip_out, filled, STATUS_DIVERGED

        t = t_new
        yd = ynd
        ys = yns
        k1d = k7d
        k1s = k7s
        if t >= horizon:
            break
        h *= _fmin(10.0, _fmax(0.2, 0.9 * pow(err, -0.2))) if err > 1e-30 else 10.0

    return delta_out, slip_out, filled, STATUS_HORIZON
