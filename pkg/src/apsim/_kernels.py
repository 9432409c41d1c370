"""Compiled integration kernels.

The glucose-insulin ODE right-hand side lives here exactly once; the public
patient-model API and the trial/optimization hot loops all call the same
compiled functions, so results are bit-identical regardless of entry point.

State vector layout (float64[11]):
    0  q1   glucose mass, accessible compartment      [mmol]
    1  q2   glucose mass, non-accessible compartment  [mmol]
    2  s1   subcutaneous insulin depot 1               [mU]
    3  s2   subcutaneous insulin depot 2               [mU]
    4  i    plasma insulin concentration               [mU/L]
    5  x1   insulin action on glucose transport        [1/min]
    6  x2   insulin action on glucose disposal         [1/min]
    7  x3   insulin action on endogenous production    [unitless]
    8  d1   gut carbohydrate compartment 1             [mmol]
    9  d2   gut carbohydrate compartment 2             [mmol]
    10 gi   interstitial (sensor) glucose              [mmol/L]

Parameter vector layout (float64[16]):
    0 k12, 1 ka1, 2 ka2, 3 ka3, 4 kb1, 5 kb2, 6 kb3, 7 ke,
    8 vi_tot [L], 9 vg_tot [L], 10 f01_tot [mmol/min],
    11 egp0_tot [mmol/min], 12 ag, 13 tmax_g [min], 14 tmax_i [min],
    15 tau_sensor [min]
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

N_STATES = 11

# Blood glucose (mmol/L) below which the non-insulin-dependent glucose flux
# scales down linearly; above which renal clearance turns on.
GLUCOSE_FLUX_KNEE = 4.5
RENAL_THRESHOLD = 9.0
RENAL_CLEARANCE = 0.003  # 1/min, multiplies (G - threshold) * V_G


@njit(cache=True)
def rhs(x, dx, u_total, carb_mmol_min, uptake_factor, sensitivity_factor, p):
    """Time derivative of the model state; writes into ``dx``."""
    q1 = x[0]
    q2 = x[1]
    s1 = x[2]
    s2 = x[3]
    ipl = x[4]
    x1 = x[5]
    x2 = x[6]
    x3 = x[7]
    d1 = x[8]
    d2 = x[9]
    gi = x[10]

    vg_tot = p[9]
    tmax_g = p[13]
    tmax_i = p[14]

    g = q1 / vg_tot
    if g >= GLUCOSE_FLUX_KNEE:
        f01c = p[10]
    else:
        f01c = p[10] * g / GLUCOSE_FLUX_KNEE
    if g >= RENAL_THRESHOLD:
        fr = RENAL_CLEARANCE * (g - RENAL_THRESHOLD) * vg_tot
    else:
        fr = 0.0

    egp = p[11] * (1.0 - x3)
    if egp < 0.0:
        egp = 0.0

    transport = sensitivity_factor * x1 * q1
    disposal = sensitivity_factor * x2 * q2
    ug = d2 / tmax_g

    dx[0] = ug + egp - f01c * uptake_factor - fr - transport + p[0] * q2
    dx[1] = transport - p[0] * q2 - disposal
    dx[2] = u_total - s1 / tmax_i
    dx[3] = s1 / tmax_i - s2 / tmax_i
    dx[4] = (s2 / tmax_i) / p[8] - p[7] * ipl
    dx[5] = p[4] * ipl - p[1] * x1
    dx[6] = p[5] * ipl - p[2] * x2
    dx[7] = p[6] * ipl - p[3] * x3
    dx[8] = p[12] * carb_mmol_min - d1 / tmax_g
    dx[9] = d1 / tmax_g - d2 / tmax_g
    dx[10] = (g - gi) / p[15]


@njit(cache=True)
def integrate_interval(x, u_total, carb_mmol_min, uptake_factor,
                       sensitivity_factor, p, n_sub, h):
    """Advance ``x`` in place over one control interval with classic RK4.

    Inputs are held constant over the interval.  Negative components are
    clamped to zero after every substep.  Returns ``(clamp_count, ok)``
    where ``ok`` is False if any component became non-finite.
    """
    k1 = np.empty(N_STATES)
    k2 = np.empty(N_STATES)
    k3 = np.empty(N_STATES)
    k4 = np.empty(N_STATES)
    xs = np.empty(N_STATES)
    clamped = 0
    for _ in range(n_sub):
        rhs(x, k1, u_total, carb_mmol_min, uptake_factor, sensitivity_factor, p)
        for i in range(N_STATES):
            xs[i] = x[i] + 0.5 * h * k1[i]
        rhs(xs, k2, u_total, carb_mmol_min, uptake_factor, sensitivity_factor, p)
        for i in range(N_STATES):
            xs[i] = x[i] + 0.5 * h * k2[i]
        rhs(xs, k3, u_total, carb_mmol_min, uptake_factor, sensitivity_factor, p)
        for i in range(N_STATES):
            xs[i] = x[i] + h * k3[i]
        rhs(xs, k4, u_total, carb_mmol_min, uptake_factor, sensitivity_factor, p)
        for i in range(N_STATES):
            x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
            if x[i] < 0.0:
                x[i] = 0.0
                clamped += 1
    ok = True
    for i in range(N_STATES):
        if not np.isfinite(x[i]):
            ok = False
    return clamped, ok


@njit(cache=True)
def simulate_cost(x, basal, bolus, carb0_mmol_min, p, n_intervals, ts_min,
                  n_sub, h, setpoint, soft_lower, kappa):
    """Noise-free simulation of the post-meal penalty integral.

    The meal and the bolus act in the first control interval only; the basal
    rate is held throughout.  The running cost is integrated as an augmented
    state with the same RK4 stepping as the dynamics.  Returns
    ``(cost, min_bg, ok)`` where ``min_bg`` is the lowest blood glucose seen
    at substep resolution.
    """
    k1 = np.empty(N_STATES)
    k2 = np.empty(N_STATES)
    k3 = np.empty(N_STATES)
    k4 = np.empty(N_STATES)
    xs = np.empty(N_STATES)
    cost = 0.0
    min_bg = x[0] / p[9]
    for interval in range(n_intervals):
        if interval == 0:
            u_total = basal + bolus
            carbs = carb0_mmol_min
        else:
            u_total = basal
            carbs = 0.0
        for _ in range(n_sub):
            rhs(x, k1, u_total, carbs, 1.0, 1.0, p)
            c1 = _penalty(x[10], setpoint, soft_lower, kappa)
            for i in range(N_STATES):
                xs[i] = x[i] + 0.5 * h * k1[i]
            rhs(xs, k2, u_total, carbs, 1.0, 1.0, p)
            c2 = _penalty(xs[10], setpoint, soft_lower, kappa)
            for i in range(N_STATES):
                xs[i] = x[i] + 0.5 * h * k2[i]
            rhs(xs, k3, u_total, carbs, 1.0, 1.0, p)
            c3 = _penalty(xs[10], setpoint, soft_lower, kappa)
            for i in range(N_STATES):
                xs[i] = x[i] + h * k3[i]
            rhs(xs, k4, u_total, carbs, 1.0, 1.0, p)
            c4 = _penalty(xs[10], setpoint, soft_lower, kappa)
            for i in range(N_STATES):
                x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
                if x[i] < 0.0:
                    x[i] = 0.0
            cost += (h / 6.0) * (c1 + 2.0 * (c2 + c3) + c4)
            bg = x[0] / p[9]
            if bg < min_bg:
                min_bg = bg
    ok = np.isfinite(cost)
    for i in range(N_STATES):
        if not np.isfinite(x[i]):
            ok = False
    return cost, min_bg, ok


@njit(cache=True)
def _penalty(z, setpoint, soft_lower, kappa):
    dev = z - setpoint
    shortfall = soft_lower - z
    if shortfall < 0.0:
        shortfall = 0.0
    return 0.5 * dev * dev + kappa * 0.5 * shortfall * shortfall
