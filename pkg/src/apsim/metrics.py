"""Glycemic outcome metrics: time in ranges, GMI, variability, targets.

Glucose is classified into five ranges (mmol/L):

    level 2 hyperglycemia   (13.9, inf)
    level 1 hyperglycemia   (10.0, 13.9]
    normoglycemia           [3.9, 10.0]
    level 1 hypoglycemia    [3.0, 3.9)
    level 2 hypoglycemia    [0.0, 3.0)

Boundary membership follows the interval notation above exactly: 3.9 and
10.0 are normoglycemic, 13.9 is level 1 hyperglycemia, 3.0 is level 1
hypoglycemia.

GMI uses the standard regression on mean glucose in mg/dL
(3.31 + 0.02392 * mean); glycemic variability is the coefficient of
variation of the CGM trace (population standard deviation over mean, in
percent).  Treatment targets and their strict/non-strict inequalities are
encoded in `evaluate_targets`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyInputError
from .units import MGDL_PER_MMOLL, MIN_PER_DAY, MU_PER_U

RANGE_NAMES = ("tar2", "tar1", "tir", "tbr1", "tbr2")

# range boundaries, mmol/L
LEVEL2_HYPER = 13.9
LEVEL1_HYPER = 10.0
NORMO_LOWER = 3.9
LEVEL1_HYPO = 3.0

GMI_INTERCEPT = 3.31
GMI_SLOPE = 0.02392  # percent per mg/dL

TARGET_NAMES = (
    "average_glucose", "gmi", "gv",
    "tar_level2", "tar_level12", "tir", "tbr_level12", "tbr_level2",
)
COMPOSITE_NAMES = ("all_tar_tir_tbr", "all_except_gv", "all_targets")


def time_in_ranges(cgm: np.ndarray) -> dict[str, float]:
    """Percentage of samples in each of the five glycemic ranges.

    The five percentages partition 100% exactly (the last one is computed
    as the complement).
    """
    cgm = np.asarray(cgm, dtype=float)
    if cgm.size == 0:
        raise EmptyInputError("cannot classify an empty CGM series")
    n = cgm.size
    tar2 = np.count_nonzero(cgm > LEVEL2_HYPER)
    tar1 = np.count_nonzero((cgm > LEVEL1_HYPER) & (cgm <= LEVEL2_HYPER))
    tir = np.count_nonzero((cgm >= NORMO_LOWER) & (cgm <= LEVEL1_HYPER))
    tbr1 = np.count_nonzero((cgm >= LEVEL1_HYPO) & (cgm < NORMO_LOWER))
    tbr2 = n - tar2 - tar1 - tir - tbr1
    return {
        "tar2": 100.0 * tar2 / n,
        "tar1": 100.0 * tar1 / n,
        "tir": 100.0 * tir / n,
        "tbr1": 100.0 * tbr1 / n,
        "tbr2": 100.0 * tbr2 / n,
    }


def gmi(mean_glucose_mgdl: float) -> float:
    """Glucose management indicator (percent) from mean glucose in mg/dL."""
    if not mean_glucose_mgdl > 0:
        raise ValueError("mean glucose must be positive")
    return GMI_INTERCEPT + GMI_SLOPE * mean_glucose_mgdl


def glycemic_variability(cgm: np.ndarray) -> float:
    """Coefficient of variation of the series, percent."""
    cgm = np.asarray(cgm, dtype=float)
    if cgm.size == 0:
        raise EmptyInputError("cannot compute variability of an empty series")
    mean = float(np.mean(cgm))
    if mean == 0:
        return 0.0
    return 100.0 * float(np.std(cgm)) / mean


@dataclass(frozen=True)
class TargetFlags:
    average_glucose: bool
    gmi: bool
    gv: bool
    tar_level2: bool
    tar_level12: bool
    tir: bool
    tbr_level12: bool
    tbr_level2: bool
    all_tar_tir_tbr: bool
    all_except_gv: bool
    all_targets: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GlycemicReport:
    tir: float
    tar1: float
    tar2: float
    tbr1: float
    tbr2: float
    mean_glucose_mmol: float
    mean_glucose_mgdl: float
    gmi: float
    gv: float
    tdd_basal: float       # U/day
    tdd_bolus: float       # U/day
    min_cgm: float         # mmol/L
    targets: TargetFlags

    def to_dict(self) -> dict:
        data = asdict(self)
        data["targets"] = self.targets.to_dict()
        return data


def evaluate_targets(mean_glucose_mgdl: float, gmi_percent: float, gv_percent: float,
                     tar2: float, tar1: float, tir: float,
                     tbr1: float, tbr2: float) -> TargetFlags:
    """Per-target pass flags plus the three composite flags.

    Strictness of each comparison follows the published target table:
    average glucose, GMI, TARs, TIR, and TBRs are strict inequalities;
    only the variability target is non-strict.
    """
    flags = {
        "average_glucose": mean_glucose_mgdl < 154.0,
        "gmi": gmi_percent < 7.0,
        "gv": gv_percent <= 36.0,
        "tar_level2": tar2 < 5.0,
        "tar_level12": tar1 + tar2 < 25.0,
        "tir": tir > 70.0,
        "tbr_level12": tbr1 + tbr2 < 4.0,
        "tbr_level2": tbr2 < 1.0,
    }
    range_targets = ("tar_level2", "tar_level12", "tir", "tbr_level12", "tbr_level2")
    flags["all_tar_tir_tbr"] = all(flags[k] for k in range_targets)
    flags["all_except_gv"] = all(flags[k] for k in TARGET_NAMES if k != "gv")
    flags["all_targets"] = all(flags[k] for k in TARGET_NAMES)
    return TargetFlags(**flags)


def glycemic_report(cgm: np.ndarray, basal: np.ndarray, bolus: np.ndarray,
                    ts_min: float) -> GlycemicReport:
    """Full outcome report for one subject's (windowed) trace.

    Dose series are mU/min held over `ts_min`; total daily doses convert
    mU to U and divide by the number of days spanned by the series.
    """
    cgm = np.asarray(cgm, dtype=float)
    if cgm.size == 0:
        raise EmptyInputError("cannot report on an empty CGM series")
    ranges = time_in_ranges(cgm)
    mean_mmol = float(np.mean(cgm))
    mean_mgdl = mean_mmol * MGDL_PER_MMOLL
    gmi_pct = gmi(mean_mgdl)
    gv_pct = glycemic_variability(cgm)
    n_days = len(cgm) * ts_min / MIN_PER_DAY
    tdd_basal = float(np.sum(basal)) * ts_min / MU_PER_U / n_days
    tdd_bolus = float(np.sum(bolus)) * ts_min / MU_PER_U / n_days
    targets = evaluate_targets(mean_mgdl, gmi_pct, gv_pct,
                               ranges["tar2"], ranges["tar1"], ranges["tir"],
                               ranges["tbr1"], ranges["tbr2"])
    return GlycemicReport(
        tir=ranges["tir"], tar1=ranges["tar1"], tar2=ranges["tar2"],
        tbr1=ranges["tbr1"], tbr2=ranges["tbr2"],
        mean_glucose_mmol=mean_mmol, mean_glucose_mgdl=mean_mgdl,
        gmi=gmi_pct, gv=gv_pct,
        tdd_basal=tdd_basal, tdd_bolus=tdd_bolus,
        min_cgm=float(np.min(cgm)),
        targets=targets,
    )


DEFAULT_CDF_GRID = np.round(np.arange(0.0, 30.0 + 1e-9, 0.05), 10)


@dataclass(frozen=True)
class CdfCurves:
    """Aggregate empirical CDFs of CGM measurements over a glucose grid."""

    grid: np.ndarray
    mean: np.ndarray
    band_lower: np.ndarray   # central 95% band, pointwise 2.5th percentile
    band_upper: np.ndarray   # pointwise 97.5th percentile
    envelope_lower: np.ndarray
    envelope_upper: np.ndarray
    worst_case: np.ndarray   # curve of the subject with the global minimum sample
    worst_case_index: int


def aggregate_reports(reports) -> dict:
    """Population aggregate: mean outcomes plus percent satisfying each target.

    Target rows keep the treatment-target table order (average glucose, GMI,
    GV, the five range targets, then the three composites).
    """
    if len(reports) == 0:
        raise EmptyInputError("need at least one subject report")

    def mean_of(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    satisfied = {
        name: 100.0 * np.mean([getattr(r.targets, name) for r in reports])
        for name in TARGET_NAMES + COMPOSITE_NAMES
    }
    return {
        "n_subjects": len(reports),
        "mean_tir": mean_of("tir"),
        "mean_tar1": mean_of("tar1"),
        "mean_tar2": mean_of("tar2"),
        "mean_tbr1": mean_of("tbr1"),
        "mean_tbr2": mean_of("tbr2"),
        "mean_glucose_mgdl": mean_of("mean_glucose_mgdl"),
        "mean_gmi": mean_of("gmi"),
        "mean_gv": mean_of("gv"),
        "mean_tdd_basal": mean_of("tdd_basal"),
        "mean_tdd_bolus": mean_of("tdd_bolus"),
        "percent_satisfying": satisfied,
    }


def subject_cdf(cgm: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Empirical CDF of one series evaluated at the grid points."""
    values = np.sort(np.asarray(cgm, dtype=float))
    return np.searchsorted(values, grid, side="right") / values.size


def cumulative_distribution(series_list, grid: np.ndarray | None = None) -> CdfCurves:
    """Pooled CDF statistics across subjects.

    The worst-case subject is the one holding the globally minimum CGM
    sample (first such subject on ties).
    """
    if len(series_list) == 0:
        raise EmptyInputError("need at least one CGM series")
    grid = DEFAULT_CDF_GRID if grid is None else np.asarray(grid, dtype=float)
    curves = np.vstack([subject_cdf(s, grid) for s in series_list])
    minima = np.array([float(np.min(np.asarray(s))) for s in series_list])
    worst = int(np.argmin(minima))
    return CdfCurves(
        grid=grid,
        mean=curves.mean(axis=0),
        band_lower=np.percentile(curves, 2.5, axis=0),
        band_upper=np.percentile(curves, 97.5, axis=0),
        envelope_lower=curves.min(axis=0),
        envelope_upper=curves.max(axis=0),
        worst_case=curves[worst],
        worst_case_index=worst,
    )
