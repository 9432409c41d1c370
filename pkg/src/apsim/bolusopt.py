"""Optimal-bolus analysis: post-meal objective, 1-D solve, meal-size sweeps.

For a given subject, the cost of a candidate bolus is the integral over a
12-hour horizon of an asymmetric quadratic penalty on the simulated CGM
output: squared deviation from the 6 mmol/L setpoint plus a heavily
weighted squared violation of the 3.9 mmol/L soft lower bound.  The meal and
the bolus act in the first control interval only; the basal rate stays at
its steady-state value throughout and is not a decision variable.

The single decision variable is resolved by a coarse scan followed by
golden-section refinement; endpoints win ties, so a zero meal yields a zero
bolus exactly.  Sweeping meal sizes produces the optimal-bolus curve and the
objective landscape, plus a two-piece continuous piecewise-linear fit of the
curve (whose break tracks the glucose level where insulin-independent uptake
starts to scale down).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import BracketFailureError, DivergenceError
from .patient import PatientParams, pack_params, steady_state
from .units import MMOL_PER_G_CHO, MU_PER_U

# golden-section interior ratio
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

# documented solver cap on the bolus flow rate (mU/min over one interval);
# 20 U over 5 min, far beyond any optimum seen in practice
DEFAULT_BOLUS_CAP = 20000.0


@dataclass(frozen=True)
class ObjectiveSpec:
    horizon_min: float = 720.0       # [t0, tf] = [0, 12] h
    setpoint: float = 6.0            # mmol/L
    soft_lower: float = 3.9          # mmol/L
    kappa: float = 1e6               # weight of the soft-bound violation
    ts_min: float = 5.0
    substep_min: float = 0.5

    def __post_init__(self):
        if not self.horizon_min > 0:
            raise ValueError("horizon must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not self.soft_lower < self.setpoint:
            raise ValueError("soft lower bound must be below the setpoint")

    @property
    def n_intervals(self) -> int:
        return int(round(self.horizon_min / self.ts_min))


@dataclass(frozen=True)
class BolusProblem:
    """One subject, one meal; the first-interval bolus is the only unknown."""

    theta: PatientParams
    meal_rate_g_min: float           # carb flow during the first interval
    spec: ObjectiveSpec = field(default_factory=ObjectiveSpec)

    def __post_init__(self):
        if self.meal_rate_g_min < 0:
            raise ValueError("meal rate must be non-negative")

    @classmethod
    def for_meal(cls, theta: PatientParams, meal_g: float,
                 spec: ObjectiveSpec | None = None) -> "BolusProblem":
        spec = spec or ObjectiveSpec()
        return cls(theta=theta, meal_rate_g_min=meal_g / spec.ts_min, spec=spec)


@lru_cache(maxsize=256)
def _prepared(theta: PatientParams, setpoint: float):
    state, basal = steady_state(theta, setpoint)
    return state.x, basal, pack_params(theta)


def _simulate(problem: BolusProblem, bolus: float) -> tuple[float, float]:
    spec = problem.spec
    x0, basal, p = _prepared(problem.theta, spec.setpoint)
    n_sub = max(1, math.ceil(spec.ts_min / spec.substep_min))
    cost, min_bg, ok = _kernels.simulate_cost(
        x0.copy(), basal, bolus,
        problem.meal_rate_g_min * MMOL_PER_G_CHO, p,
        spec.n_intervals, spec.ts_min, n_sub, spec.ts_min / n_sub,
        spec.setpoint, spec.soft_lower, spec.kappa)
    if not ok:
        raise DivergenceError(f"objective simulation diverged at bolus {bolus}")
    return cost, min_bg


def objective(problem: BolusProblem, bolus: float) -> float:
    """Penalty integral for administering `bolus` (mU/min) with the meal."""
    if bolus < 0:
        raise ValueError("bolus must be non-negative")
    return _simulate(problem, bolus)[0]


def optimal_bolus(problem: BolusProblem, cap: float = DEFAULT_BOLUS_CAP,
                  rel_tol: float = 1e-3, n_scan: int = 257) -> float:
    """Minimize the objective over bolus in [0, cap].

    A uniform scan brackets the minimum, golden-section refines it to below
    `rel_tol` of the bracket width, and the better of the refined point and
    the nearest scan endpoint is returned (so boundary optima are exact).
    Raises `BracketFailureError` when the objective is still decreasing at
    the cap.
    """
    grid = np.linspace(0.0, cap, n_scan)
    values = np.array([objective(problem, b) for b in grid])
    best = int(np.argmin(values))
    if best == n_scan - 1:
        raise BracketFailureError(
            f"objective still decreasing at the bolus cap {cap} mU/min")
    lo = grid[best - 1] if best > 0 else grid[0]
    hi = grid[best + 1]
    tol = rel_tol * (hi - lo)

    a, b = lo, hi
    x1 = b - _INV_PHI * (b - a)
    x2 = a + _INV_PHI * (b - a)
    f1 = objective(problem, x1)
    f2 = objective(problem, x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INV_PHI * (b - a)
            f1 = objective(problem, x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INV_PHI * (b - a)
            f2 = objective(problem, x2)
    refined = x1 if f1 <= f2 else x2
    refined_value = min(f1, f2)
    # an endpoint of the scan (typically 0) may dominate the interior
    if values[best] <= refined_value:
        return float(grid[best])
    return float(refined)


@dataclass(frozen=True)
class TwoPieceLinearFit:
    """Continuous 2-segment least-squares fit of the optimal-bolus curve."""

    breakpoint_g: float
    intercept: float
    slope_low: float        # mU/min per g below the breakpoint
    slope_high: float       # above it
    rel_rms: float          # RMSE / RMS of the curve

    def predict(self, meal_g: np.ndarray) -> np.ndarray:
        meal_g = np.asarray(meal_g, dtype=float)
        hinge = np.maximum(0.0, meal_g - self.breakpoint_g)
        return self.intercept + self.slope_low * meal_g \
            + (self.slope_high - self.slope_low) * hinge


def fit_two_piece_linear(meal_g: np.ndarray, bolus: np.ndarray) -> TwoPieceLinearFit:
    """Best continuous two-piece linear fit over interior breakpoints."""
    meal_g = np.asarray(meal_g, dtype=float)
    bolus = np.asarray(bolus, dtype=float)
    if len(meal_g) < 4:
        raise ValueError("need at least 4 points to fit two segments")
    best = None
    for j in range(1, len(meal_g) - 1):
        basis = np.column_stack([
            np.ones_like(meal_g), meal_g,
            np.maximum(0.0, meal_g - meal_g[j]),
        ])
        coef, *_ = np.linalg.lstsq(basis, bolus, rcond=None)
        sse = float(np.sum((basis @ coef - bolus) ** 2))
        if best is None or sse < best[0]:
            best = (sse, j, coef)
    sse, j, coef = best
    rms = math.sqrt(float(np.mean(bolus ** 2)))
    rel = math.sqrt(sse / len(meal_g)) / rms if rms > 0 else 0.0
    return TwoPieceLinearFit(
        breakpoint_g=float(meal_g[j]),
        intercept=float(coef[0]),
        slope_low=float(coef[1]),
        slope_high=float(coef[1] + coef[2]),
        rel_rms=rel,
    )


@dataclass
class SweepResult:
    meal_grid_g: np.ndarray
    optimal_bolus: np.ndarray    # mU/min
    optimal_phi: np.ndarray
    min_bg: np.ndarray           # lowest blood glucose under the optimal bolus
    bolus_grid: np.ndarray
    landscape: np.ndarray        # phi, shape (n_meals, n_bolus)
    fit: TwoPieceLinearFit | None
    ts_min: float = 5.0


def curve_sweep(theta: PatientParams, meal_grid_g: np.ndarray,
                spec: ObjectiveSpec | None = None,
                cap: float = DEFAULT_BOLUS_CAP,
                n_landscape_bolus: int = 121) -> SweepResult:
    """Optimal-bolus curve plus the objective landscape over a meal grid."""
    spec = spec or ObjectiveSpec()
    meal_grid_g = np.asarray(meal_grid_g, dtype=float)
    bolus_grid = np.linspace(0.0, cap, n_landscape_bolus)
    optimal = np.empty_like(meal_grid_g)
    phi_opt = np.empty_like(meal_grid_g)
    min_bg = np.empty_like(meal_grid_g)
    landscape = np.empty((len(meal_grid_g), len(bolus_grid)))
    for i, meal in enumerate(meal_grid_g):
        problem = BolusProblem.for_meal(theta, float(meal), spec)
        optimal[i] = optimal_bolus(problem, cap=cap)
        phi_opt[i], min_bg[i] = _simulate(problem, float(optimal[i]))
        for j, b in enumerate(bolus_grid):
            landscape[i, j] = objective(problem, float(b))
    fit = fit_two_piece_linear(meal_grid_g, optimal) if len(meal_grid_g) >= 4 else None
    return SweepResult(meal_grid_g=meal_grid_g, optimal_bolus=optimal,
                       optimal_phi=phi_opt, min_bg=min_bg,
                       bolus_grid=bolus_grid, landscape=landscape, fit=fit,
                       ts_min=spec.ts_min)


def landscape_curve_gap(result: SweepResult) -> float:
    """Largest distance (in bolus units) between each meal column's landscape
    minimum and the optimal curve; consistency means at most one grid cell."""
    worst = 0.0
    for i in range(len(result.meal_grid_g)):
        col_min = result.bolus_grid[int(np.argmin(result.landscape[i]))]
        worst = max(worst, abs(col_min - result.optimal_bolus[i]))
    return worst


def first_hypo_crossing(result: SweepResult,
                        threshold: float = _kernels.GLUCOSE_FLUX_KNEE) -> float | None:
    """Smallest meal size whose optimally dosed trajectory dips below `threshold`."""
    below = np.nonzero(result.min_bg < threshold)[0]
    if len(below) == 0:
        return None
    return float(result.meal_grid_g[below[0]])


def write_curve_csv(result: SweepResult, path) -> None:
    """Curve file: meal size, optimal bolus (rate and units), cost, nadir."""
    with open(path, "w") as fh:
        fh.write("meal_g,optimal_bolus_mU_min,optimal_bolus_U,phi,min_bg_mmol_L\n")
        for i in range(len(result.meal_grid_g)):
            bolus_u = result.optimal_bolus[i] * result.ts_min / MU_PER_U
            fh.write(",".join(repr(float(v)) for v in (
                result.meal_grid_g[i], result.optimal_bolus[i], bolus_u,
                result.optimal_phi[i], result.min_bg[i])) + "\n")


def write_landscape_csv(result: SweepResult, path) -> None:
    """Landscape file, long format: one (meal, bolus, phi) row per grid point."""
    with open(path, "w") as fh:
        fh.write("meal_g,bolus_mU_min,phi\n")
        for i in range(len(result.meal_grid_g)):
            for j in range(len(result.bolus_grid)):
                fh.write(",".join(repr(float(v)) for v in (
                    result.meal_grid_g[i], result.bolus_grid[j],
                    result.landscape[i, j])) + "\n")
