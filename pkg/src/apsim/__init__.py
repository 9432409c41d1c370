"""Closed-loop artificial-pancreas simulation toolkit.

Modules:
    controller  adaptive basal/bolus dosing law
    patient     glucose-insulin physiology, CGM sensor, exercise hook
    protocol    seeded lifestyle scenario generation
    simulator   closed-loop engine and Monte Carlo trial harness
    metrics     glycemic outcome statistics and treatment targets
    bolusopt    optimal-bolus analysis and meal-size sweeps
    cli         command-line front end
"""

__version__ = "0.1.0"

from .controller import ControllerParams, ControllerState, DoseCommand, step
from .metrics import GlycemicReport, glycemic_report, time_in_ranges
from .patient import (
    DisturbanceInput, HovorkaParams, PatientParams, PatientState,
    advance, derivatives, nominal_patient, output, steady_state,
    steady_state_zero_insulin,
)
from .protocol import ProtocolConfig, Scenario, generate, to_zoh_series
from .simulator import Population, Trajectory, run_closed_loop, run_trial, sample_population
from .bolusopt import BolusProblem, ObjectiveSpec, curve_sweep, objective, optimal_bolus

__all__ = [
    "ControllerParams", "ControllerState", "DoseCommand", "step",
    "GlycemicReport", "glycemic_report", "time_in_ranges",
    "DisturbanceInput", "HovorkaParams", "PatientParams", "PatientState",
    "advance", "derivatives", "nominal_patient", "output", "steady_state",
    "steady_state_zero_insulin",
    "ProtocolConfig", "Scenario", "generate", "to_zoh_series",
    "Population", "Trajectory", "run_closed_loop", "run_trial", "sample_population",
    "BolusProblem", "ObjectiveSpec", "curve_sweep", "objective", "optimal_bolus",
]
