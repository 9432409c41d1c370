"""Unit conversion constants shared across the package.

All glucose concentrations are mmol/L internally; mg/dL appears only in
clinical reports and is always derived through MGDL_PER_MMOLL.  Insulin flow
rates are mU/min, daily doses U/day, carbohydrates grams (g CHO).
"""

# Molar mass of glucose, g/mol.
GLUCOSE_MOLAR_MASS = 180.16

# mg/dL per mmol/L (molar mass / 10).  Single definition site.
MGDL_PER_MMOLL = GLUCOSE_MOLAR_MASS / 10.0

# mmol of glucose per gram of carbohydrate.
MMOL_PER_G_CHO = 1000.0 / GLUCOSE_MOLAR_MASS

MIN_PER_HOUR = 60.0
MIN_PER_DAY = 1440.0
MU_PER_U = 1000.0


def mmoll_to_mgdl(value: float) -> float:
    return value * MGDL_PER_MMOLL


def mgdl_to_mmoll(value: float) -> float:
    return value / MGDL_PER_MMOLL
