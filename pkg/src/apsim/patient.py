"""Virtual subject: glucose-insulin physiology, CGM sensor, exercise hook.

The physiological core is a two-compartment glucose model with subcutaneous
insulin absorption, plasma insulin kinetics, three insulin-action states,
and two-compartment gut absorption.  Nominal constants (units and values):

    ============  =======================  ==========================
    name          value                    units
    ============  =======================  ==========================
    k12           0.066                    1/min
    ka1           0.006                    1/min
    ka2           0.06                     1/min
    ka3           0.03                     1/min
    si_t          51.2e-4                  1/min per mU/L
    si_d          8.2e-4                   1/min per mU/L
    si_e          520e-4                   L/mU
    ke            0.138                    1/min
    vi            0.12                     L/kg
    vg            0.16                     L/kg
    f01           0.0097                   mmol/(kg min)
    egp0          0.0161                   mmol/(kg min)
    ag            0.8                      unitless (bioavailability)
    tmax_g        40.0                     min
    tmax_i        55.0                     min
    ============  =======================  ==========================

Two regime switches matter for the dosing analysis: the non-insulin-dependent
glucose flux scales down linearly below 4.5 mmol/L, and renal clearance turns
on above 9 mmol/L.  Endogenous production is clamped at zero when the
insulin-action state exceeds one.

The CGM model is a first-order interstitial lag plus additive AR(1) noise
advanced once per control interval.  The exercise hook maps an intensity in
[0, 1] to two multiplicative factors (insulin-independent glucose uptake and
insulin sensitivity); the default is linear in intensity and can be replaced
by passing a different callable to `advance` or to the simulator.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .errors import DivergenceError, NoSteadyStateError
from .units import MMOL_PER_G_CHO

# Fixed-step RK4 substep ceiling (min); one control interval of 5 min is
# integrated in 10 substeps.
MAX_SUBSTEP_MIN = 0.5

STATE_LABELS = (
    "q1_mmol", "q2_mmol", "s1_mU", "s2_mU", "i_mU_L",
    "x1_per_min", "x2_per_min", "x3", "d1_mmol", "d2_mmol", "gi_mmol_L",
)


@dataclass(frozen=True)
class HovorkaParams:
    k12: float = 0.066
    ka1: float = 0.006
    ka2: float = 0.06
    ka3: float = 0.03
    si_t: float = 51.2e-4
    si_d: float = 8.2e-4
    si_e: float = 520e-4
    ke: float = 0.138
    vi: float = 0.12
    vg: float = 0.16
    f01: float = 0.0097
    egp0: float = 0.0161
    ag: float = 0.8
    tmax_g: float = 40.0
    tmax_i: float = 55.0


@dataclass(frozen=True)
class CgmParams:
    """Sensor dynamics and noise.

    `tau_min` is the plasma-to-interstitium lag; the additive error is AR(1)
    with coefficient `ar_coeff` and driving standard deviation `noise_std`
    (mmol/L), updated once per control interval.  Defaults are plausible for
    a current-generation sensor and are configurable, not calibrated against
    any specific device.
    """

    tau_min: float = 6.7
    ar_coeff: float = 0.85
    noise_std: float = 0.158


@dataclass(frozen=True)
class ExerciseParams:
    """Gains of the default exercise hook (per unit intensity)."""

    uptake_gain: float = 0.3
    sensitivity_gain: float = 0.3


@dataclass(frozen=True)
class PatientParams:
    bodyweight: float = 70.0
    hovorka: HovorkaParams = field(default_factory=HovorkaParams)
    cgm: CgmParams = field(default_factory=CgmParams)
    exercise: ExerciseParams = field(default_factory=ExerciseParams)
    rng_seed: int = 0

    def __post_init__(self):
        if not self.bodyweight > 0:
            raise ValueError("bodyweight must be positive")
        h = self.hovorka
        for name in ("k12", "ka1", "ka2", "ka3", "ke", "tmax_g", "tmax_i"):
            if not getattr(h, name) > 0:
                raise ValueError(f"time constant {name} must be positive")
        for name in ("vi", "vg"):
            if not getattr(h, name) > 0:
                raise ValueError(f"volume {name} must be positive")
        if not self.cgm.tau_min > 0:
            raise ValueError("sensor time constant must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PatientParams":
        return cls(
            bodyweight=data["bodyweight"],
            hovorka=HovorkaParams(**data["hovorka"]),
            cgm=CgmParams(**data["cgm"]),
            exercise=ExerciseParams(**data["exercise"]),
            rng_seed=data["rng_seed"],
        )


def save_patient_params(params: PatientParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)
        fh.write("\n")


def load_patient_params(path) -> PatientParams:
    with open(path) as fh:
        return PatientParams.from_dict(json.load(fh))


@dataclass
class PatientState:
    """Model state: 11-component vector plus the discrete sensor-noise state.

    Component order and units follow `STATE_LABELS`.
    """

    x: np.ndarray
    sensor_noise: float = 0.0

    def copy(self) -> "PatientState":
        return PatientState(x=self.x.copy(), sensor_noise=self.sensor_noise)


@dataclass(frozen=True)
class DisturbanceInput:
    carb_rate: float = 0.0            # g CHO/min
    exercise_intensity: float = 0.0   # fraction of max effort, [0, 1]

    def __post_init__(self):
        if self.carb_rate < 0:
            raise ValueError("carb rate must be non-negative")
        if not 0.0 <= self.exercise_intensity <= 1.0:
            raise ValueError("exercise intensity must lie in [0, 1]")


NO_DISTURBANCE = DisturbanceInput()


def default_exercise_effect(intensity: float, params: ExerciseParams) -> tuple[float, float]:
    """Intensity -> (uptake factor, insulin-sensitivity factor)."""
    return (1.0 + params.uptake_gain * intensity,
            1.0 + params.sensitivity_gain * intensity)


def pack_params(theta: PatientParams) -> np.ndarray:
    """Flatten parameters into the kernel layout (totals scaled by bodyweight)."""
    h = theta.hovorka
    bw = theta.bodyweight
    return np.array([
        h.k12, h.ka1, h.ka2, h.ka3,
        h.ka1 * h.si_t, h.ka2 * h.si_d, h.ka3 * h.si_e,
        h.ke, h.vi * bw, h.vg * bw,
        h.f01 * bw, h.egp0 * bw, h.ag, h.tmax_g, h.tmax_i,
        theta.cgm.tau_min,
    ])


def derivatives(state: PatientState, u: tuple[float, float],
                d: DisturbanceInput, theta: PatientParams,
                exercise_effect=default_exercise_effect) -> np.ndarray:
    """Time derivative of the state vector for inputs held constant.

    `u` is (basal, bolus) in mU/min; both flow into the first subcutaneous
    depot.  Carbohydrates enter gut absorption after conversion to
    mmol/min.
    """
    uptake_f, sens_f = exercise_effect(d.exercise_intensity, theta.exercise)
    dx = np.empty(_kernels.N_STATES)
    _kernels.rhs(state.x, dx, u[0] + u[1], d.carb_rate * MMOL_PER_G_CHO,
                 uptake_f, sens_f, pack_params(theta))
    return dx


def output(state: PatientState, theta: PatientParams) -> float:
    """CGM reading: interstitial glucose plus the additive noise state."""
    return state.x[10] + state.sensor_noise


def bg(state: PatientState, theta: PatientParams) -> float:
    """Blood glucose concentration (mmol/L)."""
    return state.x[0] / (theta.hovorka.vg * theta.bodyweight)


def _transport_balance(i_plasma: float, g: float, theta: PatientParams) -> float:
    """Net glucose flux at concentration `g` with plasma insulin `i_plasma`."""
    h = theta.hovorka
    bw = theta.bodyweight
    vg_tot = h.vg * bw
    q1 = g * vg_tot
    x1 = h.si_t * i_plasma
    x2 = h.si_d * i_plasma
    x3 = h.si_e * i_plasma
    egp = max(0.0, h.egp0 * bw * (1.0 - x3))
    f01c = h.f01 * bw if g >= _kernels.GLUCOSE_FLUX_KNEE \
        else h.f01 * bw * g / _kernels.GLUCOSE_FLUX_KNEE
    fr = _kernels.RENAL_CLEARANCE * (g - _kernels.RENAL_THRESHOLD) * vg_tot \
        if g >= _kernels.RENAL_THRESHOLD else 0.0
    disposal = x1 * q1 * x2 / (h.k12 + x2) if i_plasma > 0 else 0.0
    return egp - f01c - fr - disposal


def _assemble_steady_state(i_plasma: float, g: float, theta: PatientParams) -> tuple[PatientState, float]:
    h = theta.hovorka
    bw = theta.bodyweight
    vg_tot = h.vg * bw
    basal = i_plasma * h.ke * h.vi * bw
    q1 = g * vg_tot
    x1 = h.si_t * i_plasma
    x2 = h.si_d * i_plasma
    q2 = x1 * q1 / (h.k12 + x2) if i_plasma > 0 else 0.0
    s1 = basal * h.tmax_i
    x = np.array([
        q1, q2, s1, s1, i_plasma,
        x1, x2, h.si_e * i_plasma,
        0.0, 0.0, q1 / vg_tot,
    ])
    return PatientState(x=x), basal


def steady_state(theta: PatientParams, target_bg: float,
                 max_expansions: int = 60) -> tuple[PatientState, float]:
    """Steady state (and the basal rate holding it) at a glucose target.

    Solves the scalar flux balance for plasma insulin, then fills in the rest
    of the state in closed form.  Raises `NoSteadyStateError` when no
    positive-basal equilibrium exists at the target or bracketing fails.
    """
    if not 3.0 < target_bg < 15.0:
        raise ValueError("target blood glucose must lie in (3, 15) mmol/L")

    def balance(i):
        return _transport_balance(i, target_bg, theta)

    if balance(0.0) <= 0.0:
        raise NoSteadyStateError(
            f"no positive-insulin steady state at {target_bg} mmol/L "
            "(production does not exceed insulin-free uptake)")
    hi = 10.0
    for _ in range(max_expansions):
        if balance(hi) < 0.0:
            break
        hi *= 2.0
    else:
        raise NoSteadyStateError("failed to bracket the steady-state insulin level")
    i_plasma = brentq(balance, 0.0, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
    return _assemble_steady_state(i_plasma, target_bg, theta)


def steady_state_zero_insulin(theta: PatientParams) -> PatientState:
    """Equilibrium with no insulin administration (closed form).

    This is the hyperglycemic resting point used to initialize trials.
    """
    h = theta.hovorka
    bw = theta.bodyweight
    egp_tot = h.egp0 * bw
    f01_tot = h.f01 * bw
    if egp_tot > f01_tot:
        g = _kernels.RENAL_THRESHOLD + (egp_tot - f01_tot) / (
            _kernels.RENAL_CLEARANCE * h.vg * bw)
    elif egp_tot == f01_tot:
        g = _kernels.RENAL_THRESHOLD
    else:
        g = _kernels.GLUCOSE_FLUX_KNEE * egp_tot / f01_tot
    state, _ = _assemble_steady_state(0.0, g, theta)
    return state


def advance(state: PatientState, u: tuple[float, float], d: DisturbanceInput,
            theta: PatientParams, dt: float,
            noise_stream: np.random.Generator | None = None,
            exercise_effect=default_exercise_effect,
            substep_min: float = MAX_SUBSTEP_MIN,
            clamp_log: list | None = None) -> PatientState:
    """Integrate one control interval with inputs held constant.

    Negative compartments are clamped to zero after each substep; clamp
    counts are appended to `clamp_log` when provided.  The sensor-noise
    state advances once per call, drawing from `noise_stream` if given.
    """
    n_sub = max(1, math.ceil(dt / substep_min))
    uptake_f, sens_f = exercise_effect(d.exercise_intensity, theta.exercise)
    x = state.x.copy()
    clamped, ok = _kernels.integrate_interval(
        x, u[0] + u[1], d.carb_rate * MMOL_PER_G_CHO,
        uptake_f, sens_f, pack_params(theta), n_sub, dt / n_sub)
    if not ok:
        raise DivergenceError("state became non-finite during integration")
    if clamped and clamp_log is not None:
        clamp_log.append(clamped)
    eps = noise_stream.standard_normal() if noise_stream is not None else 0.0
    noise = theta.cgm.ar_coeff * state.sensor_noise + theta.cgm.noise_std * eps
    return PatientState(x=x, sensor_noise=noise)


def nominal_patient(rng_seed: int = 0, bodyweight: float = 70.0) -> PatientParams:
    return PatientParams(bodyweight=bodyweight, rng_seed=rng_seed)
