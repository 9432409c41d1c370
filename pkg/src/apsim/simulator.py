"""Closed-loop engine and Monte Carlo trial harness.

One subject's simulation couples the dosing controller, the physiological
model, and a lifestyle scenario on a shared 5-minute grid: at each step the
controller reads the CGM value and the meal announcement, emits clipped
basal/bolus rates, and the model integrates one interval under those inputs.
The state starts at the insulin-free (hyperglycemic) equilibrium and the
controller estimates start at zero, so early weeks show the adaptation
transient.

Trials run subjects independently.  All randomness is counter-based and
keyed by subject identity (never by execution order), so results are
bit-identical for any worker count.  Per-subject trajectories can be
streamed to disk; only summary-sized results are held in memory.
"""

from __future__ import annotations

import datetime
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, controller, metrics, protocol
from .errors import (
    ApsimError, DivergenceError, InvalidMeasurementError, SamplingExhaustedError,
)
from .patient import (
    HovorkaParams, PatientParams, default_exercise_effect, pack_params,
    steady_state_zero_insulin,
)
from .units import MMOL_PER_G_CHO

DEFAULT_START_DATE = datetime.date(2021, 1, 1)
DEFAULT_WARMUP_WEEKS = 4

TRAJECTORY_COLUMNS = (
    "t_min", "cgm_mmol_L", "bg_mmol_L", "basal_mU_min", "bolus_mU_min",
    "carb_g_min", "announced_g", "exercise",
    "w_ba", "w_ma", "w_bo", "e_ba", "e_bo", "p_ma", "d_ma",
    "i_basal", "i_bolus", "rejected",
)


@dataclass
class Trajectory:
    """Per-step record of one closed-loop simulation."""

    subject_id: int
    ts_min: float
    t_min: np.ndarray
    cgm: np.ndarray
    bg: np.ndarray
    basal: np.ndarray
    bolus: np.ndarray
    carb_rate: np.ndarray
    announced: np.ndarray
    exercise: np.ndarray
    w_ba: np.ndarray
    w_ma: np.ndarray
    w_bo: np.ndarray
    e_ba: np.ndarray
    e_bo: np.ndarray
    p_ma: np.ndarray
    d_ma: np.ndarray
    i_basal: np.ndarray
    i_bolus: np.ndarray
    rejected: np.ndarray = None
    clamp_events: list = field(default_factory=list)

    def __post_init__(self):
        if self.rejected is None:
            self.rejected = np.zeros(len(self.t_min), dtype=np.int8)

    @property
    def n_steps(self) -> int:
        return len(self.t_min)

    def column(self, name: str) -> np.ndarray:
        mapping = {
            "t_min": self.t_min, "cgm_mmol_L": self.cgm, "bg_mmol_L": self.bg,
            "basal_mU_min": self.basal, "bolus_mU_min": self.bolus,
            "carb_g_min": self.carb_rate, "announced_g": self.announced,
            "exercise": self.exercise,
            "w_ba": self.w_ba, "w_ma": self.w_ma, "w_bo": self.w_bo,
            "e_ba": self.e_ba, "e_bo": self.e_bo,
            "p_ma": self.p_ma, "d_ma": self.d_ma,
            "i_basal": self.i_basal, "i_bolus": self.i_bolus,
            "rejected": self.rejected,
        }
        return mapping[name]


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columnar trajectory file: fixed column order, shortest round-trip floats."""
    cols = [traj.column(name) for name in TRAJECTORY_COLUMNS]
    with open(path, "w") as fh:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_trajectory_csv(path, subject_id: int = -1, ts_min: float = 5.0) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)

    def get(name):
        return np.atleast_1d(data[name])

    t = get("t_min")
    ts = float(t[1] - t[0]) if len(t) > 1 else ts_min
    return Trajectory(
        subject_id=subject_id, ts_min=ts,
        t_min=t, cgm=get("cgm_mmol_L"), bg=get("bg_mmol_L"),
        basal=get("basal_mU_min"), bolus=get("bolus_mU_min"),
        carb_rate=get("carb_g_min"), announced=get("announced_g"),
        exercise=get("exercise"),
        w_ba=get("w_ba"), w_ma=get("w_ma"), w_bo=get("w_bo"),
        e_ba=get("e_ba"), e_bo=get("e_bo"),
        p_ma=get("p_ma"), d_ma=get("d_ma"),
        i_basal=get("i_basal"), i_bolus=get("i_bolus"),
        rejected=get("rejected"),
    )


def noise_stream(theta: PatientParams) -> np.random.Generator:
    """Counter-based sensor-noise stream keyed by the subject's seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(theta.rng_seed)))


def run_closed_loop(patient: PatientParams, scenario: protocol.Scenario,
                    controller_params: controller.ControllerParams,
                    duration_min: float,
                    subject_id: int = 0,
                    exercise_effect=default_exercise_effect) -> Trajectory:
    """Simulate one subject for `duration_min` minutes.

    The patient starts at the insulin-free steady state with zeroed
    controller estimates.  Doses commanded at step k are held over
    [t_k, t_{k+1}).  Raises `DivergenceError` (tagged with subject and step)
    if integration produces a non-finite state.

    When the controller rejects a sample as out of range (which happens
    routinely during the hyperglycemic start-up transient), the previous
    basal rate is held, no bolus is given, the controller state is left
    untouched, and the step is flagged in the `rejected` column.
    """
    ts = controller_params.sample_interval_min
    n_steps = int(duration_min // ts)
    series = protocol.to_zoh_series(scenario, ts, n_intervals=n_steps)

    state = steady_state_zero_insulin(patient)
    cstate = controller.ControllerState()
    p = pack_params(patient)
    n_sub = max(1, math.ceil(ts / 0.5))
    h = ts / n_sub
    vg_tot = patient.hovorka.vg * patient.bodyweight
    cgm_par = patient.cgm
    eps = noise_stream(patient).standard_normal(n_steps)

    traj = Trajectory(
        subject_id=subject_id, ts_min=ts,
        t_min=np.arange(n_steps) * ts,
        cgm=np.empty(n_steps), bg=np.empty(n_steps),
        basal=np.empty(n_steps), bolus=np.empty(n_steps),
        carb_rate=series.carb_rate[:n_steps].copy(),
        announced=series.announced_grams[:n_steps].copy(),
        exercise=series.exercise[:n_steps].copy(),
        w_ba=np.empty(n_steps, dtype=np.int8),
        w_ma=np.empty(n_steps, dtype=np.int8),
        w_bo=np.empty(n_steps, dtype=np.int8),
        e_ba=np.empty(n_steps), e_bo=np.empty(n_steps),
        p_ma=np.empty(n_steps), d_ma=np.empty(n_steps),
        i_basal=np.empty(n_steps), i_bolus=np.empty(n_steps),
    )

    x = state.x.copy()
    noise = state.sensor_noise
    held_basal = 0.0
    for k in range(n_steps):
        t = k * ts
        y = x[10] + noise
        traj.cgm[k] = y
        traj.bg[k] = x[0] / vg_tot
        try:
            cmd, cstate = controller.step(
                cstate, controller_params, t, y,
                announced_carbs=float(traj.announced[k]),
                bodyweight=patient.bodyweight)
            diag = cmd.diagnostics
            basal_rate, bolus_rate = cmd.basal_rate, cmd.bolus_rate
            held_basal = basal_rate
            traj.w_ba[k] = diag.w_ba
            traj.w_ma[k] = diag.w_ma
            traj.w_bo[k] = diag.w_bo
            traj.e_ba[k] = diag.e_ba
            traj.e_bo[k] = diag.e_bo
            traj.p_ma[k] = diag.p_ma
            traj.d_ma[k] = diag.d_ma
        except InvalidMeasurementError:
            basal_rate, bolus_rate = held_basal, 0.0
            traj.rejected[k] = 1
            traj.w_ba[k] = traj.w_ma[k] = traj.w_bo[k] = 0
            traj.e_ba[k] = traj.e_bo[k] = 0.0
            traj.p_ma[k] = traj.d_ma[k] = 0.0

        intensity = float(traj.exercise[k])
        if intensity > 0.0:
            uptake_f, sens_f = exercise_effect(intensity, patient.exercise)
        else:
            uptake_f, sens_f = 1.0, 1.0
        clamped, ok = _kernels.integrate_interval(
            x, basal_rate + bolus_rate,
            float(traj.carb_rate[k]) * MMOL_PER_G_CHO,
            uptake_f, sens_f, p, n_sub, h)
        if not ok:
            raise DivergenceError(
                f"subject {subject_id} diverged at step {k} (t = {t} min)",
                subject_id=subject_id, step=k)

        traj.basal[k] = basal_rate
        traj.bolus[k] = bolus_rate
        traj.i_basal[k] = cstate.i_basal
        traj.i_bolus[k] = cstate.i_bolus
        if clamped:
            traj.clamp_events.append((k, clamped))
        noise = cgm_par.ar_coeff * noise + cgm_par.noise_std * eps[k]
    return traj


# --- population sampling ---------------------------------------------------

# log-space standard deviations of the multiplicative perturbations; chosen,
# not taken from any published cohort
DEFAULT_DISPERSIONS = {
    "si_t": 0.4, "si_d": 0.4, "si_e": 0.4,
    "k12": 0.25, "ka1": 0.25, "ka2": 0.25, "ka3": 0.25, "ke": 0.25,
    "tmax_g": 0.25, "tmax_i": 0.25,
    "vi": 0.1, "vg": 0.1,
    "f01": 0.15, "egp0": 0.15,
    "ag": 0.1,
    "bodyweight": 0.15,
    "cgm_tau": 0.2,
}

# retained subjects must produce more glucose than they burn without insulin
# (otherwise no positive basal exists and they are not insulin-dependent)
MIN_EGP_OVER_F01 = 1.02

TIME_CONSTANT_SCREEN_FACTOR = 10.0


def _time_constants(theta: PatientParams) -> dict[str, float]:
    h = theta.hovorka
    return {
        "tmax_g": h.tmax_g, "tmax_i": h.tmax_i,
        "inv_k12": 1.0 / h.k12, "inv_ka1": 1.0 / h.ka1,
        "inv_ka2": 1.0 / h.ka2, "inv_ka3": 1.0 / h.ka3,
        "inv_ke": 1.0 / h.ke, "cgm_tau": theta.cgm.tau_min,
    }


def passes_screens(theta: PatientParams, nominal: PatientParams) -> bool:
    ref = _time_constants(nominal)
    for name, value in _time_constants(theta).items():
        if value > TIME_CONSTANT_SCREEN_FACTOR * ref[name]:
            return False
        if value < ref[name] / TIME_CONSTANT_SCREEN_FACTOR:
            return False
    return theta.hovorka.egp0 > MIN_EGP_OVER_F01 * theta.hovorka.f01


@dataclass
class Population:
    subjects: list
    seed: int
    rejections: int

    def __len__(self) -> int:
        return len(self.subjects)


def _perturbed(nominal: PatientParams, factors: dict[str, float],
               rng_seed: int) -> PatientParams:
    h = nominal.hovorka
    return PatientParams(
        bodyweight=nominal.bodyweight * factors["bodyweight"],
        hovorka=HovorkaParams(
            k12=h.k12 * factors["k12"],
            ka1=h.ka1 * factors["ka1"],
            ka2=h.ka2 * factors["ka2"],
            ka3=h.ka3 * factors["ka3"],
            si_t=h.si_t * factors["si_t"],
            si_d=h.si_d * factors["si_d"],
            si_e=h.si_e * factors["si_e"],
            ke=h.ke * factors["ke"],
            vi=h.vi * factors["vi"],
            vg=h.vg * factors["vg"],
            f01=h.f01 * factors["f01"],
            egp0=h.egp0 * factors["egp0"],
            ag=h.ag * factors["ag"],
            tmax_g=h.tmax_g * factors["tmax_g"],
            tmax_i=h.tmax_i * factors["tmax_i"],
        ),
        cgm=replace(nominal.cgm, tau_min=nominal.cgm.tau_min * factors["cgm_tau"]),
        exercise=nominal.exercise,
        rng_seed=rng_seed,
    )


def sample_population(nominal: PatientParams, n: int, seed: int,
                      dispersions: dict[str, float] | None = None,
                      max_attempts_per_subject: int = 1000) -> Population:
    """Sample `n` subjects around the nominal parameter set.

    Each parameter gets an independent log-normal multiplicative factor.
    Subjects failing the screens (any time constant more than 10x away from
    nominal, or insufficient endogenous production to need insulin) are
    resampled; the rejection count is recorded.
    """
    if n < 1:
        raise ValueError("population size must be at least 1")
    sigma = dict(DEFAULT_DISPERSIONS)
    if dispersions is not None:
        unknown = set(dispersions) - set(sigma)
        if unknown:
            raise ValueError(f"unknown dispersion keys: {sorted(unknown)}")
        sigma.update(dispersions)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    names = sorted(sigma)
    subjects = []
    rejections = 0
    for i in range(n):
        rng_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        for _ in range(max_attempts_per_subject):
            draws = rng.standard_normal(len(names))
            factors = {name: math.exp(sigma[name] * z)
                       for name, z in zip(names, draws)}
            candidate = _perturbed(nominal, factors, rng_seed)
            if passes_screens(candidate, nominal):
                subjects.append(candidate)
                break
            rejections += 1
        else:
            raise SamplingExhaustedError(
                f"subject {i}: no acceptable draw in "
                f"{max_attempts_per_subject} attempts")
    return Population(subjects=subjects, seed=seed, rejections=rejections)


def population_to_json(population: Population) -> str:
    data = {
        "seed": population.seed,
        "rejections": population.rejections,
        "subjects": [s.to_dict() for s in population.subjects],
    }
    return json.dumps(data, indent=2) + "\n"


def population_from_json(text: str) -> Population:
    data = json.loads(text)
    return Population(
        subjects=[PatientParams.from_dict(s) for s in data["subjects"]],
        seed=data["seed"],
        rejections=data["rejections"],
    )


# --- trial harness ----------------------------------------------------------

@dataclass
class SubjectResult:
    subject_id: int
    ok: bool
    error: str = ""
    report: metrics.GlycemicReport | None = None
    min_cgm_full: float = math.nan    # over the whole trial incl. warm-up
    max_basal: float = math.nan       # largest commanded rates, whole trial
    max_bolus: float = math.nan
    clamp_count: int = 0
    cdf: np.ndarray | None = None     # eval-window ECDF on metrics.DEFAULT_CDF_GRID
    tir_parts: tuple = ()             # (tar2, tar1, tir, tbr1, tbr2) for box plots


@dataclass
class TrialResult:
    subjects: list
    weeks: int
    warmup_weeks: int
    scenario_seed: int

    @property
    def ok_subjects(self) -> list:
        return [s for s in self.subjects if s.ok]

    @property
    def failed_subjects(self) -> list:
        return [s for s in self.subjects if not s.ok]

    def reports(self) -> list:
        return [s.report for s in self.ok_subjects]

    def aggregate(self) -> dict:
        agg = metrics.aggregate_reports(self.reports())
        agg["n_failed"] = len(self.failed_subjects)
        minima = [s.min_cgm_full for s in self.ok_subjects]
        worst = int(np.argmin(minima))
        agg["worst_case_subject"] = self.ok_subjects[worst].subject_id
        agg["worst_case_min_cgm"] = float(minima[worst])
        return agg


def scenario_seed_for(scenario_seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence((scenario_seed, subject_id)).generate_state(1)[0])


def _simulate_subject(args) -> SubjectResult:
    (subject_id, patient, scenario_seed, weeks, warmup_weeks, cparams,
     start_date, protocol_config, traj_dir) = args
    ts = cparams.sample_interval_min
    duration = weeks * 7 * protocol.MINUTES_PER_DAY
    warmup_steps = int(warmup_weeks * 7 * protocol.MINUTES_PER_DAY // ts)
    try:
        scenario = protocol.generate(
            scenario_seed_for(scenario_seed, subject_id), start_date, weeks,
            patient.bodyweight, protocol_config)
        traj = run_closed_loop(patient, scenario, cparams, duration,
                               subject_id=subject_id)
    except ApsimError as exc:
        return SubjectResult(subject_id=subject_id, ok=False, error=str(exc))
    if traj_dir is not None:
        write_trajectory_csv(traj, f"{traj_dir}/trajectory_{subject_id:06d}.csv")
    cgm_eval = traj.cgm[warmup_steps:]
    report = metrics.glycemic_report(cgm_eval, traj.basal[warmup_steps:],
                                     traj.bolus[warmup_steps:], ts)
    return SubjectResult(
        subject_id=subject_id, ok=True, report=report,
        min_cgm_full=float(np.min(traj.cgm)),
        max_basal=float(np.max(traj.basal)),
        max_bolus=float(np.max(traj.bolus)),
        clamp_count=int(sum(c for _, c in traj.clamp_events)),
        cdf=metrics.subject_cdf(cgm_eval, metrics.DEFAULT_CDF_GRID),
        tir_parts=(report.tar2, report.tar1, report.tir, report.tbr1, report.tbr2),
    )


def run_trial(population: Population, scenario_seed: int, weeks: int,
              controller_params: controller.ControllerParams | None = None,
              workers: int = 1,
              warmup_weeks: int = DEFAULT_WARMUP_WEEKS,
              start_date: datetime.date = DEFAULT_START_DATE,
              protocol_config: protocol.ProtocolConfig = protocol.DEFAULT_CONFIG,
              traj_dir=None) -> TrialResult:
    """Run every subject and collect per-subject reports.

    Metrics are computed over the window after `warmup_weeks`; subject
    failures are recorded and do not abort the trial.  Results are
    independent of `workers`.
    """
    if len(population) == 0:
        raise ValueError("population is empty")
    if not 0 <= warmup_weeks < weeks:
        raise ValueError("warm-up must be shorter than the trial")
    cparams = controller_params or controller.ControllerParams()
    tasks = [
        (i, subject, scenario_seed, weeks, warmup_weeks, cparams,
         start_date, protocol_config, traj_dir)
        for i, subject in enumerate(population.subjects)
    ]
    if workers <= 1:
        results = [_simulate_subject(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_subject, tasks, chunksize=1))
    results.sort(key=lambda r: r.subject_id)
    return TrialResult(subjects=results, weeks=weeks, warmup_weeks=warmup_weeks,
                       scenario_seed=scenario_seed)
