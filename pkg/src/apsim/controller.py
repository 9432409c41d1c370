"""Adaptive insulin dosing law.

Discrete-time controller that maps one CGM sample (plus an optional meal
announcement) to basal and bolus insulin flow rates.  The nominal basal rate
and the meal bolus factor are estimated online by two extended integral
controllers with deadbands, a hypoglycemia amplification factor, and
non-negativity projection; a PD term applies microadjustments to the basal
rate.  The meal bolus is a continuous piecewise linear function of the
announced carbohydrates normalized with bodyweight and interval length.

A single parameter set is intended to serve every user; only the bodyweight
enters the dose computation besides the CGM trace and the announcements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import InvalidAnnouncementError, InvalidMeasurementError, SequencingError

# CGM samples outside this range (mmol/L) are rejected as sensor faults.
CGM_VALID_RANGE = (0.0, 50.0)

STATE_SNAPSHOT_VERSION = 1

# Serialized field order for ControllerState snapshots (version 1).
_STATE_FIELDS = ("i_basal", "i_bolus", "prev_cgm", "last_meal_time", "last_time")


@dataclass(frozen=True)
class ControllerParams:
    """Tuned constants of the dosing law.

    Defaults are the published one-size-fits-all values; they are not meant
    to be re-tuned per user.
    """

    sample_interval_min: float = 5.0        # T_s
    u_max_basal: float = 55.0               # mU/min
    u_max_bolus: float = 8000.0             # mU/min
    target: float = 6.0                     # mmol/L
    safety_threshold: float = 3.0           # mmol/L
    meal_window_h: float = 9.5              # hours
    k_i_basal: float = 4e-4                 # mU L/(mmol min^2)
    basal_deadband: tuple[float, float] = (3.9, 8.0)   # mmol/L
    hypo_amplification: float = 100.0       # unitless
    k_p_ma: float = 0.3                     # mU L/(mmol min)
    k_d_ma: float = 10.0                    # mU L/mmol
    carb_threshold: float = 0.1             # g CHO/(kg min)
    beta: float = 2.0                       # unitless slope divisor
    k_i_bolus: float = 0.05                 # mU kg L/(g CHO mmol min)
    bolus_deadband: tuple[float, float] = (3.9, 10.0)  # mmol/L
    bolus_clip_threshold: float = 13.9      # mmol/L

    def __post_init__(self):
        positive = {
            "sample_interval_min": self.sample_interval_min,
            "u_max_basal": self.u_max_basal,
            "u_max_bolus": self.u_max_bolus,
            "meal_window_h": self.meal_window_h,
            "k_i_basal": self.k_i_basal,
            "hypo_amplification": self.hypo_amplification,
            "k_p_ma": self.k_p_ma,
            "k_d_ma": self.k_d_ma,
            "carb_threshold": self.carb_threshold,
            "beta": self.beta,
            "k_i_bolus": self.k_i_bolus,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not self.basal_deadband[0] < self.basal_deadband[1]:
            raise ValueError("basal deadband lower bound must be below upper bound")
        if not self.bolus_deadband[0] < self.bolus_deadband[1]:
            raise ValueError("bolus deadband lower bound must be below upper bound")
        if not self.bolus_clip_threshold > self.bolus_deadband[1]:
            raise ValueError("bolus clip threshold must exceed the bolus deadband upper bound")
        if not self.safety_threshold < self.target:
            raise ValueError("safety threshold must be below the target")

    @property
    def meal_window_min(self) -> float:
        return self.meal_window_h * 60.0

    def to_config_text(self) -> str:
        """Flat key = value serialization (defaults reproduce this object)."""
        lines = ["# apsim controller parameters"]
        for key, value in self._flat_items():
            lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"

    def _flat_items(self):
        return [
            ("sample_interval_min", self.sample_interval_min),
            ("u_max_basal", self.u_max_basal),
            ("u_max_bolus", self.u_max_bolus),
            ("target", self.target),
            ("safety_threshold", self.safety_threshold),
            ("meal_window_h", self.meal_window_h),
            ("k_i_basal", self.k_i_basal),
            ("basal_deadband_lower", self.basal_deadband[0]),
            ("basal_deadband_upper", self.basal_deadband[1]),
            ("hypo_amplification", self.hypo_amplification),
            ("k_p_ma", self.k_p_ma),
            ("k_d_ma", self.k_d_ma),
            ("carb_threshold", self.carb_threshold),
            ("beta", self.beta),
            ("k_i_bolus", self.k_i_bolus),
            ("bolus_deadband_lower", self.bolus_deadband[0]),
            ("bolus_deadband_upper", self.bolus_deadband[1]),
            ("bolus_clip_threshold", self.bolus_clip_threshold),
        ]

    @classmethod
    def from_config_text(cls, text: str) -> "ControllerParams":
        values = _parse_key_values(text)
        known = dict(cls()._flat_items())
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown controller parameter keys: {sorted(unknown)}")
        known.update(values)
        return cls(
            sample_interval_min=known["sample_interval_min"],
            u_max_basal=known["u_max_basal"],
            u_max_bolus=known["u_max_bolus"],
            target=known["target"],
            safety_threshold=known["safety_threshold"],
            meal_window_h=known["meal_window_h"],
            k_i_basal=known["k_i_basal"],
            basal_deadband=(known["basal_deadband_lower"], known["basal_deadband_upper"]),
            hypo_amplification=known["hypo_amplification"],
            k_p_ma=known["k_p_ma"],
            k_d_ma=known["k_d_ma"],
            carb_threshold=known["carb_threshold"],
            beta=known["beta"],
            k_i_bolus=known["k_i_bolus"],
            bolus_deadband=(known["bolus_deadband_lower"], known["bolus_deadband_upper"]),
            bolus_clip_threshold=known["bolus_clip_threshold"],
        )


def _parse_key_values(text: str) -> dict[str, float]:
    values: dict[str, float] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = float(value.strip())
    return values


@dataclass(frozen=True)
class ControllerState:
    """Evolving estimator state.

    `i_basal` is the nominal basal rate estimate (mU/min) and `i_bolus` the
    meal bolus factor (mU kg / g CHO); both are kept non-negative by the
    update law.  Timestamps are minutes on the caller's clock.  `last_time`
    exists only to detect out-of-order samples.
    """

    i_basal: float = 0.0
    i_bolus: float = 0.0
    prev_cgm: float | None = None
    last_meal_time: float | None = None
    last_time: float | None = None

    def snapshot_text(self) -> str:
        """Versioned snapshot; field order is fixed per version."""
        lines = [f"version = {STATE_SNAPSHOT_VERSION}"]
        for name in _STATE_FIELDS:
            value = getattr(self, name)
            lines.append(f"{name} = {'none' if value is None else repr(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_snapshot_text(cls, text: str) -> "ControllerState":
        fields: dict[str, float | None] = {}
        version = None
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "version":
                version = int(value)
            else:
                fields[key] = None if value == "none" else float(value)
        if version != STATE_SNAPSHOT_VERSION:
            raise ValueError(f"unsupported controller state snapshot version: {version}")
        missing = set(_STATE_FIELDS) - set(fields)
        if missing:
            raise ValueError(f"snapshot missing fields: {sorted(missing)}")
        return cls(**{name: fields[name] for name in _STATE_FIELDS})


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step internals, recorded for simulation logs."""

    w_ba: int
    w_ma: int
    w_bo: int
    e_ba: float
    e_bo: float
    p_ma: float
    d_ma: float
    u_ba_nominal: float


@dataclass(frozen=True)
class DoseCommand:
    basal_rate: float   # mU/min, in [0, u_max_basal]
    bolus_rate: float   # mU/min, in [0, u_max_bolus]
    diagnostics: StepDiagnostics


def _validate_cgm(y: float) -> None:
    if not math.isfinite(y) or y <= 0:
        raise InvalidMeasurementError(f"invalid CGM measurement: {y!r}")


def basal_error(y: float, params: ControllerParams) -> float:
    """Deadband error driving the basal-rate integrator.

    Above the deadband the error is the excess over the upper bound; below
    it the shortfall is amplified so that hypoglycemia drives the estimate
    down fast; inside the deadband the estimate is left alone.
    """
    _validate_cgm(y)
    lower, upper = params.basal_deadband
    if y > upper:
        return y - upper
    if y < lower:
        return params.hypo_amplification * (y - lower)
    return 0.0


def bolus_error(y: float, params: ControllerParams) -> float:
    """Deadband error driving the bolus-factor integrator.

    Same structure as `basal_error` plus clipping: every measurement above
    `bolus_clip_threshold` yields the same error, so extreme post-meal peaks
    do not inflate the bolus factor without bound.
    """
    _validate_cgm(y)
    lower, upper = params.bolus_deadband
    threshold = params.bolus_clip_threshold
    if y > threshold:
        return threshold - upper
    if y >= upper:
        return y - upper
    if y < lower:
        return params.hypo_amplification * (y - lower)
    return 0.0


def bolus_curve(alpha: float, d_hat: float, params: ControllerParams) -> float:
    """Meal bolus flow rate as a function of the normalized carb rate.

    Proportional with slope `alpha` up to `carb_threshold`; beyond it the
    slope is divided by `beta`.  Continuous at the threshold by
    construction.
    """
    if d_hat < 0:
        raise InvalidAnnouncementError(f"negative normalized carb rate: {d_hat!r}")
    if alpha < 0:
        raise ValueError(f"negative bolus factor: {alpha!r}")
    d_th = params.carb_threshold
    if d_hat > d_th:
        return alpha * d_th + (alpha / params.beta) * (d_hat - d_th)
    return alpha * d_hat


def step(
    state: ControllerState,
    params: ControllerParams,
    t: float,
    y: float,
    announced_carbs: float = 0.0,
    bodyweight: float = 70.0,
) -> tuple[DoseCommand, ControllerState]:
    """Advance the controller by one sampling interval.

    `t` is the sample time in minutes and must strictly increase between
    calls; `announced_carbs` is the carbohydrate mass (g CHO) the user
    announces for this interval (0 when no meal).  Returns the clipped dose
    command and the successor state.  An invalid measurement raises without
    mutating state.
    """
    if state.last_time is not None and not t > state.last_time:
        raise SequencingError(
            f"timestamp {t} does not advance past previous sample at {state.last_time}"
        )
    if not math.isfinite(y) or not (CGM_VALID_RANGE[0] < y <= CGM_VALID_RANGE[1]):
        raise InvalidMeasurementError(f"CGM measurement out of range: {y!r}")
    if announced_carbs < 0:
        raise InvalidAnnouncementError(f"negative meal announcement: {announced_carbs!r}")
    if not bodyweight > 0:
        raise ValueError(f"bodyweight must be positive, got {bodyweight!r}")

    ts = params.sample_interval_min

    # A meal announced now starts its suppression window at this very step.
    last_meal_time = t if announced_carbs > 0 else state.last_meal_time

    # Basal estimation runs only when the last announced meal is more than
    # the meal window ago (or no meal was ever announced); bolus estimation
    # runs exactly otherwise.
    if last_meal_time is None or (t - last_meal_time) > params.meal_window_min:
        w_ba, w_bo = 1, 0
    else:
        w_ba, w_bo = 0, 1
    w_ma = 1 if (y < params.target or w_ba == 1) else 0

    # Integrator updates use the current measurement; the updated estimates
    # feed the current dose.  Swap these two blocks below the dose
    # computation to use the pre-update estimates instead.
    e_ba = basal_error(y, params)
    i_basal = max(0.0, state.i_basal + w_ba * params.k_i_basal * e_ba * ts)
    e_bo = bolus_error(y, params)
    i_bolus = max(0.0, state.i_bolus + w_bo * params.k_i_bolus * e_bo * ts)

    p_ma = w_ma * params.k_p_ma * (y - params.target)
    if state.prev_cgm is None:
        d_ma = 0.0
    else:
        d_ma = w_ma * params.k_d_ma * (y - state.prev_cgm) / ts
    u_ma = p_ma + d_ma

    u_ba_nominal = i_basal
    if y >= params.target:
        basal = u_ba_nominal + u_ma
    elif y > params.safety_threshold:
        basal = u_ba_nominal + min(0.0, u_ma)
    else:
        basal = 0.0

    d_hat = announced_carbs / (bodyweight * ts)
    bolus = bolus_curve(i_bolus, d_hat, params)

    command = DoseCommand(
        basal_rate=max(0.0, min(params.u_max_basal, basal)),
        bolus_rate=max(0.0, min(params.u_max_bolus, bolus)),
        diagnostics=StepDiagnostics(
            w_ba=w_ba, w_ma=w_ma, w_bo=w_bo,
            e_ba=e_ba, e_bo=e_bo,
            p_ma=p_ma, d_ma=d_ma,
            u_ba_nominal=u_ba_nominal,
        ),
    )
    new_state = replace(
        state,
        i_basal=i_basal,
        i_bolus=i_bolus,
        prev_cgm=y,
        last_meal_time=last_meal_time,
        last_time=t,
    )
    return command, new_state
