"""Command-line front end.

Subcommands: `simulate` (one subject), `trial` (Monte Carlo population run),
`bolus-curve` (optimal-bolus sweeps), `report` (recompute metrics from
stored trajectories).  Configuration is layered: built-in defaults, then an
optional JSON config file, then command-line overrides.  Every run echoes
its fully resolved configuration to `<out>/run_config.json`; execution
details that do not affect results (the worker count) are kept in a separate
section of that manifest.

Figures are not rendered here; each subcommand writes plot-ready columnar
files instead.

Exit codes: 0 success, 2 configuration error, 3 simulation or solver
failure, 4 trial completed with failed subjects.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bolusopt, controller, metrics, protocol, simulator
from .errors import ApsimError, ConfigError
from .patient import CgmParams, PatientParams, nominal_patient
from .simulator import DEFAULT_START_DATE

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_PARTIAL = 4

SIMULATE_DEFAULTS = {
    "weeks": 2,
    "scenario_seed": 1,
    "subject_seed": 0,
    "bodyweight": 70.0,
    "population_file": None,
    "subject_id": 0,
    "controller_config": None,
    "no_noise": False,
    "window_start_day": None,
    "window_start_hour": 6,
    "window_days": 4,
}

TRIAL_DEFAULTS = {
    "subjects": 10,
    "weeks": 6,
    "warmup_weeks": 4,
    "population_seed": 1,
    "scenario_seed": 1,
    "population_file": None,
    "controller_config": None,
    "no_noise": False,
    "save_trajectories": False,
}

BOLUS_DEFAULTS = {
    "subjects": 6,
    "population_seed": 202,
    "population_file": None,
    "subject_ids": None,
    "meal_min_g": 10.0,
    "meal_max_g": 150.0,
    "meal_points": 15,
    "bolus_cap": bolusopt.DEFAULT_BOLUS_CAP,
    "landscape_points": 121,
    "kappa": 1e6,
    "no_noise": False,
}

REPORT_DEFAULTS = {
    "trajectories": None,
    "warmup_weeks": 0,
}


def _resolve_config(defaults: dict, config_file: str | None, overrides: dict) -> dict:
    resolved = dict(defaults)
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {config_file}")
        try:
            file_values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out: Path, subcommand: str, config: dict, execution: dict) -> None:
    manifest = {"subcommand": subcommand, "config": config, "execution": execution}
    (out / "run_config.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _controller_params(config: dict) -> controller.ControllerParams:
    path = config.get("controller_config")
    if path is None:
        return controller.ControllerParams()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"controller config not found: {path}")
    try:
        return controller.ControllerParams.from_config_text(p.read_text())
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _silence_cgm(theta: PatientParams) -> PatientParams:
    from dataclasses import replace
    return replace(theta, cgm=CgmParams(tau_min=theta.cgm.tau_min,
                                        ar_coeff=theta.cgm.ar_coeff,
                                        noise_std=0.0))


def _load_population(config: dict, n: int, seed: int) -> simulator.Population:
    if config.get("population_file"):
        path = Path(config["population_file"])
        if not path.exists():
            raise ConfigError(f"population file not found: {path}")
        population = simulator.population_from_json(path.read_text())
    else:
        population = simulator.sample_population(nominal_patient(), n, seed)
    if config.get("no_noise"):
        population = simulator.Population(
            subjects=[_silence_cgm(s) for s in population.subjects],
            seed=population.seed, rejections=population.rejections)
    return population


def _fmt(value) -> str:
    return repr(float(value))


def _write_subject_reports(path: Path, result: simulator.TrialResult) -> None:
    target_cols = metrics.TARGET_NAMES + metrics.COMPOSITE_NAMES
    header = (
        ["subject_id", "status", "tir", "tar1", "tar2", "tbr1", "tbr2",
         "mean_glucose_mmol", "mean_glucose_mgdl", "gmi", "gv",
         "tdd_basal", "tdd_bolus", "min_cgm", "min_cgm_full"]
        + [f"target_{name}" for name in target_cols] + ["error"]
    )
    lines = [",".join(header)]
    for s in result.subjects:
        if s.ok:
            r = s.report
            row = ([str(s.subject_id), "ok"]
                   + [_fmt(v) for v in (r.tir, r.tar1, r.tar2, r.tbr1, r.tbr2,
                                        r.mean_glucose_mmol, r.mean_glucose_mgdl,
                                        r.gmi, r.gv, r.tdd_basal, r.tdd_bolus,
                                        r.min_cgm, s.min_cgm_full)]
                   + [str(int(getattr(r.targets, name))) for name in target_cols]
                   + [""])
        else:
            row = ([str(s.subject_id), "failed"] + [""] * 13
                   + [""] * len(target_cols) + [s.error.replace(",", ";")])
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


TARGETS_TABLE_ROWS = (
    ("average_glucose", "< 154 mg/dL"),
    ("gmi", "< 7 %"),
    ("gv", "<= 36 %"),
    ("tar_level2", "< 5 %"),
    ("tar_level12", "< 25 %"),
    ("tir", "> 70 %"),
    ("tbr_level12", "< 4 %"),
    ("tbr_level2", "< 1 %"),
    ("all_tar_tir_tbr", ""),
    ("all_except_gv", ""),
    ("all_targets", ""),
)


def _write_targets_table(path: Path, aggregate: dict) -> None:
    satisfied = aggregate["percent_satisfying"]
    lines = ["quantity,target,percent_satisfied"]
    for name, target in TARGETS_TABLE_ROWS:
        lines.append(f"{name},{target},{_fmt(satisfied[name])}")
    path.write_text("\n".join(lines) + "\n")


def _write_cdf(path: Path, result: simulator.TrialResult) -> None:
    ok = result.ok_subjects
    curves = np.vstack([s.cdf for s in ok])
    minima = np.array([s.min_cgm_full for s in ok])
    worst = int(np.argmin(minima))
    grid = metrics.DEFAULT_CDF_GRID
    cols = {
        "glucose_mmol_L": grid,
        "mean": curves.mean(axis=0),
        "band_lower_2p5": np.percentile(curves, 2.5, axis=0),
        "band_upper_97p5": np.percentile(curves, 97.5, axis=0),
        "envelope_lower": curves.min(axis=0),
        "envelope_upper": curves.max(axis=0),
        "worst_case": curves[worst],
    }
    lines = [",".join(cols)]
    for i in range(len(grid)):
        lines.append(",".join(_fmt(col[i]) for col in cols.values()))
    path.write_text("\n".join(lines) + "\n")


def _write_boxplot_data(path: Path, result: simulator.TrialResult) -> None:
    lines = ["subject_id,tar2,tar1,tir,tbr1,tbr2"]
    for s in result.ok_subjects:
        lines.append(str(s.subject_id) + "," + ",".join(_fmt(v) for v in s.tir_parts))
    path.write_text("\n".join(lines) + "\n")


def _write_tdd_data(path: Path, hist_path: Path, result: simulator.TrialResult) -> None:
    lines = ["subject_id,tdd_basal_U,tdd_bolus_U"]
    for s in result.ok_subjects:
        lines.append(f"{s.subject_id},{_fmt(s.report.tdd_basal)},{_fmt(s.report.tdd_bolus)}")
    path.write_text("\n".join(lines) + "\n")

    edges = np.arange(0.0, 62.5, 2.5)
    basal = np.histogram([s.report.tdd_basal for s in result.ok_subjects], bins=edges)[0]
    bolus = np.histogram([s.report.tdd_bolus for s in result.ok_subjects], bins=edges)[0]
    lines = ["bin_lower_U,bin_upper_U,count_basal,count_bolus"]
    for i in range(len(edges) - 1):
        lines.append(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{basal[i]},{bolus[i]}")
    hist_path.write_text("\n".join(lines) + "\n")


def cmd_simulate(args) -> int:
    config = _resolve_config(SIMULATE_DEFAULTS, args.config, {
        "weeks": args.weeks,
        "scenario_seed": args.scenario_seed,
        "subject_seed": args.seed,
        "population_file": args.population,
        "subject_id": args.subject_id,
        "controller_config": args.controller_config,
        "no_noise": True if args.no_noise else None,
        "window_start_day": args.window_start_day,
        "window_days": args.window_days,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cparams = _controller_params(config)
    if config["population_file"]:
        population = _load_population(config, 1, config["subject_seed"])
        sid = config["subject_id"]
        if not 0 <= sid < len(population):
            raise ConfigError(f"subject_id {sid} outside population of {len(population)}")
        theta = population.subjects[sid]
    else:
        sid = config["subject_id"]
        theta = nominal_patient(rng_seed=config["subject_seed"],
                                bodyweight=config["bodyweight"])
        if config["no_noise"]:
            theta = _silence_cgm(theta)
    weeks = config["weeks"]
    scenario = protocol.generate(
        simulator.scenario_seed_for(config["scenario_seed"], sid),
        DEFAULT_START_DATE, weeks, theta.bodyweight)
    traj = simulator.run_closed_loop(
        theta, scenario, cparams, weeks * 7 * protocol.MINUTES_PER_DAY,
        subject_id=sid)
    simulator.write_trajectory_csv(traj, out / f"trajectory_{sid:06d}.csv")

    if config["window_start_day"] is not None:
        ts = cparams.sample_interval_min
        start = int((config["window_start_day"] * protocol.MINUTES_PER_DAY
                     + config["window_start_hour"] * 60.0) // ts)
        stop = start + int(config["window_days"] * protocol.MINUTES_PER_DAY // ts)
        if not 0 <= start < traj.n_steps:
            raise ConfigError("window start lies outside the simulated span")
        window = simulator.Trajectory(
            subject_id=sid, ts_min=ts,
            **{name: getattr(traj, name)[start:stop] for name in (
                "t_min", "cgm", "bg", "basal", "bolus", "carb_rate",
                "announced", "exercise", "w_ba", "w_ma", "w_bo",
                "e_ba", "e_bo", "p_ma", "d_ma", "i_basal", "i_bolus",
                "rejected")})
        simulator.write_trajectory_csv(window, out / "window.csv")

    report = metrics.glycemic_report(traj.cgm, traj.basal, traj.bolus,
                                     cparams.sample_interval_min)
    (out / f"report_{sid:06d}.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n")
    _write_manifest(out, "simulate", config, execution={})
    return EXIT_OK


def cmd_trial(args) -> int:
    config = _resolve_config(TRIAL_DEFAULTS, args.config, {
        "subjects": args.subjects,
        "weeks": args.weeks,
        "warmup_weeks": args.warmup_weeks,
        "population_seed": args.population_seed,
        "scenario_seed": args.scenario_seed,
        "population_file": args.population,
        "controller_config": args.controller_config,
        "no_noise": True if args.no_noise else None,
        "save_trajectories": True if args.save_trajectories else None,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cparams = _controller_params(config)
    population = _load_population(config, config["subjects"], config["population_seed"])
    (out / "population.json").write_text(simulator.population_to_json(population))

    traj_dir = None
    if config["save_trajectories"]:
        traj_dir = out / "trajectories"
        traj_dir.mkdir(exist_ok=True)
    result = simulator.run_trial(
        population, config["scenario_seed"], config["weeks"],
        controller_params=cparams, workers=args.workers,
        warmup_weeks=config["warmup_weeks"],
        traj_dir=str(traj_dir) if traj_dir else None)

    _write_subject_reports(out / "subject_reports.csv", result)
    if result.ok_subjects:
        aggregate = result.aggregate()
        (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n")
        _write_targets_table(out / "targets_table.csv", aggregate)
        _write_cdf(out / "cdf.csv", result)
        _write_boxplot_data(out / "tir_boxplot.csv", result)
        _write_tdd_data(out / "tdd_per_subject.csv", out / "tdd_histogram.csv", result)
    _write_manifest(out, "trial", config, execution={"workers": args.workers})
    if result.failed_subjects:
        print(f"trial finished with {len(result.failed_subjects)} failed subjects",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_bolus_curve(args) -> int:
    config = _resolve_config(BOLUS_DEFAULTS, args.config, {
        "subjects": args.subjects,
        "population_seed": args.population_seed,
        "population_file": args.population,
        "meal_max_g": args.meal_max,
        "meal_points": args.meal_points,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    population = _load_population(config, config["subjects"], config["population_seed"])
    ids = config["subject_ids"] or list(range(min(config["subjects"], len(population))))
    meal_grid = np.linspace(config["meal_min_g"], config["meal_max_g"],
                            config["meal_points"])
    spec = bolusopt.ObjectiveSpec(kappa=config["kappa"])

    fit_lines = ["subject_id,breakpoint_g,slope_low,slope_high,rel_rms,"
                 "first_hypo_crossing_g,landscape_gap_mU_min"]
    for sid in ids:
        theta = population.subjects[sid]
        result = bolusopt.curve_sweep(
            theta, meal_grid, spec, cap=config["bolus_cap"],
            n_landscape_bolus=config["landscape_points"])
        bolusopt.write_curve_csv(result, out / f"curve_subject{sid:03d}.csv")
        bolusopt.write_landscape_csv(result, out / f"landscape_subject{sid:03d}.csv")
        crossing = bolusopt.first_hypo_crossing(result)
        fit = result.fit
        fit_lines.append(",".join([
            str(sid), _fmt(fit.breakpoint_g), _fmt(fit.slope_low),
            _fmt(fit.slope_high), _fmt(fit.rel_rms),
            "" if crossing is None else _fmt(crossing),
            _fmt(bolusopt.landscape_curve_gap(result)),
        ]))
    (out / "fit_summary.csv").write_text("\n".join(fit_lines) + "\n")
    _write_manifest(out, "bolus-curve", config, execution={})
    return EXIT_OK


def cmd_report(args) -> int:
    config = _resolve_config(REPORT_DEFAULTS, args.config, {
        "trajectories": args.trajectories,
        "warmup_weeks": args.warmup_weeks,
    })
    if not config["trajectories"]:
        raise ConfigError("report requires a trajectories directory")
    traj_dir = Path(config["trajectories"])
    if not traj_dir.is_dir():
        raise ConfigError(f"not a directory: {traj_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(traj_dir.glob("trajectory_*.csv"))
    if not paths:
        raise ConfigError(f"no trajectory files in {traj_dir}")
    subjects = []
    for path in paths:
        sid = int(path.stem.split("_")[1])
        traj = simulator.read_trajectory_csv(path, subject_id=sid)
        warm = int(config["warmup_weeks"] * 7 * protocol.MINUTES_PER_DAY // traj.ts_min)
        cgm = traj.cgm[warm:]
        report = metrics.glycemic_report(cgm, traj.basal[warm:], traj.bolus[warm:],
                                         traj.ts_min)
        subjects.append(simulator.SubjectResult(
            subject_id=sid, ok=True, report=report,
            min_cgm_full=float(np.min(traj.cgm)),
            cdf=metrics.subject_cdf(cgm, metrics.DEFAULT_CDF_GRID),
            tir_parts=(report.tar2, report.tar1, report.tir,
                       report.tbr1, report.tbr2)))
    result = simulator.TrialResult(subjects=subjects, weeks=0,
                                   warmup_weeks=config["warmup_weeks"],
                                   scenario_seed=0)
    _write_subject_reports(out / "subject_reports.csv", result)
    aggregate = result.aggregate()
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n")
    _write_targets_table(out / "targets_table.csv", aggregate)
    _write_manifest(out, "report", config, execution={})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apsim",
        description="Closed-loop artificial-pancreas simulation toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run one subject and write its trajectory")
    sim.add_argument("--out", required=True)
    sim.add_argument("--config")
    sim.add_argument("--weeks", type=int)
    sim.add_argument("--seed", type=int, help="subject RNG seed")
    sim.add_argument("--scenario-seed", type=int, dest="scenario_seed")
    sim.add_argument("--population", help="population JSON to pick the subject from")
    sim.add_argument("--subject-id", type=int, dest="subject_id")
    sim.add_argument("--controller-config", dest="controller_config")
    sim.add_argument("--no-noise", action="store_true")
    sim.add_argument("--window-start-day", type=int, dest="window_start_day")
    sim.add_argument("--window-days", type=int, dest="window_days")
    sim.set_defaults(func=cmd_simulate)

    trial = sub.add_parser("trial", help="run a Monte Carlo virtual trial")
    trial.add_argument("--out", required=True)
    trial.add_argument("--config")
    trial.add_argument("--subjects", type=int)
    trial.add_argument("--weeks", type=int)
    trial.add_argument("--warmup-weeks", type=int, dest="warmup_weeks")
    trial.add_argument("--workers", type=int, default=1)
    trial.add_argument("--population-seed", type=int, dest="population_seed")
    trial.add_argument("--scenario-seed", type=int, dest="scenario_seed")
    trial.add_argument("--population")
    trial.add_argument("--controller-config", dest="controller_config")
    trial.add_argument("--no-noise", action="store_true")
    trial.add_argument("--save-trajectories", action="store_true",
                       dest="save_trajectories")
    trial.set_defaults(func=cmd_trial)

    curve = sub.add_parser("bolus-curve", help="optimal-bolus curves and landscapes")
    curve.add_argument("--out", required=True)
    curve.add_argument("--config")
    curve.add_argument("--subjects", type=int)
    curve.add_argument("--population-seed", type=int, dest="population_seed")
    curve.add_argument("--population")
    curve.add_argument("--meal-max", type=float, dest="meal_max")
    curve.add_argument("--meal-points", type=int, dest="meal_points")
    curve.set_defaults(func=cmd_bolus_curve)

    rep = sub.add_parser("report", help="recompute reports from stored trajectories")
    rep.add_argument("--out", required=True)
    rep.add_argument("--config")
    rep.add_argument("--trajectories")
    rep.add_argument("--warmup-weeks", type=int, dest="warmup_weeks")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ApsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
