"""Lifestyle scenario generation: seasons, weeks, days, meals, exercise.

A year is composed of four 13-week seasons; each season mixes standard,
active, and vacation weeks in fixed proportions, and each week mixes four
day types (standard, active, movie night, late night).  Meal carbohydrate
contents scale with bodyweight and come in exactly four sizes.  During
spring and summer the dinner is a medium meal and the snack moves to
mid-morning.

Week-type order within a season and day-type order within a week are
shuffled by a seeded counter-based RNG, so a scenario is a pure function of
(seed, start date, weeks, bodyweight, config).  Clock times and the
slot-to-size assignment are configurable defaults; the season/week
compositions and the four meal sizes are fixed by the protocol.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import asdict, dataclass, field

import numpy as np

MINUTES_PER_DAY = 1440.0
DAYS_PER_WEEK = 7
WEEKS_PER_SEASON = 13

SEASONS = ("winter", "spring", "summer", "autumn")

# week-type counts per season: (standard, active, vacation), summing to 13
SEASON_COMPOSITION = {
    "winter": (6, 4, 3),
    "spring": (6, 6, 1),
    "summer": (7, 3, 3),
    "autumn": (9, 3, 1),
}

# day-type counts per week type: (standard, active, movie_night, late_night)
WEEK_COMPOSITION = {
    "standard": (4, 1, 1, 1),
    "active": (3, 3, 1, 0),
    "vacation": (5, 0, 0, 2),
}

WEEK_TYPES = ("standard", "active", "vacation")
DAY_TYPES = ("standard", "active", "movie_night", "late_night")

# canonical bodyweight-scaled meal sizes, g CHO per kg
MEAL_SIZES_G_PER_KG = {
    "large": 1.29,
    "medium": 0.86,
    "small": 0.57,
    "snack": 0.29,
}


@dataclass(frozen=True)
class ProtocolConfig:
    """Clock times (minutes from midnight) and slot sizes of the day templates.

    Only the four size values and the seasonal dinner/snack rule are fixed by
    the protocol; everything else here is an overridable default.  The
    late-night meal is eaten at 01:00 the following morning, hence its time
    exceeds one day.
    """

    meal_sizes_g_per_kg: dict = field(default_factory=lambda: dict(MEAL_SIZES_G_PER_KG))
    breakfast_time_min: float = 7 * 60.0
    breakfast_size: str = "small"
    lunch_time_min: float = 12 * 60.0
    lunch_size: str = "medium"
    snack_time_autumn_winter_min: float = 15 * 60.0
    snack_time_spring_summer_min: float = 10 * 60.0
    snack_size: str = "snack"
    dinner_time_min: float = 18 * 60.0
    dinner_size_autumn_winter: str = "large"
    dinner_size_spring_summer: str = "medium"
    movie_snack_time_min: float = 21 * 60.0
    movie_snack_size: str = "snack"
    late_meal_time_min: float = 25 * 60.0
    late_meal_size: str = "small"
    exercise_start_min: float = 17 * 60.0
    exercise_duration_min: float = 60.0
    exercise_intensity: float = 0.5
    consumption_duration_min: float = 5.0
    announce_meals: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown protocol config keys: {sorted(unknown)}")
        return cls(**data)


DEFAULT_CONFIG = ProtocolConfig()


@dataclass(frozen=True)
class MealEvent:
    time_min: float
    grams_per_kg: float
    announced: bool = True


@dataclass(frozen=True)
class ExerciseEvent:
    start_min: float
    duration_min: float
    intensity: float


@dataclass(frozen=True)
class Scenario:
    start_date: datetime.date
    events: tuple
    day_labels: tuple
    week_labels: tuple
    season_labels: tuple
    bodyweight: float
    config: ProtocolConfig

    @property
    def meals(self) -> tuple:
        return tuple(e for e in self.events if isinstance(e, MealEvent))

    @property
    def exercises(self) -> tuple:
        return tuple(e for e in self.events if isinstance(e, ExerciseEvent))

    @property
    def n_days(self) -> int:
        return len(self.day_labels)

    def total_grams(self) -> float:
        return sum(e.grams_per_kg * self.bodyweight for e in self.meals)


def _season_of_week(week_index: int) -> str:
    return SEASONS[(week_index // WEEKS_PER_SEASON) % len(SEASONS)]


def _day_events(day_type: str, season: str, day_start_min: float,
                cfg: ProtocolConfig) -> list:
    sizes = cfg.meal_sizes_g_per_kg
    cold = season in ("autumn", "winter")
    snack_time = cfg.snack_time_autumn_winter_min if cold else cfg.snack_time_spring_summer_min
    dinner_size = cfg.dinner_size_autumn_winter if cold else cfg.dinner_size_spring_summer
    meals = [
        (cfg.breakfast_time_min, cfg.breakfast_size),
        (cfg.lunch_time_min, cfg.lunch_size),
        (snack_time, cfg.snack_size),
        (cfg.dinner_time_min, dinner_size),
    ]
    if day_type == "movie_night":
        meals.append((cfg.movie_snack_time_min, cfg.movie_snack_size))
    elif day_type == "late_night":
        meals.append((cfg.late_meal_time_min, cfg.late_meal_size))
    events = [
        MealEvent(day_start_min + t, sizes[size], cfg.announce_meals)
        for t, size in meals
    ]
    if day_type == "active":
        events.append(ExerciseEvent(day_start_min + cfg.exercise_start_min,
                                    cfg.exercise_duration_min,
                                    cfg.exercise_intensity))
    return events


def _shuffled(items: list, rng: np.random.Generator) -> list:
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def generate(seed: int, start_date: datetime.date, weeks: int, bodyweight: float,
             config: ProtocolConfig = DEFAULT_CONFIG) -> Scenario:
    """Build a seeded scenario of `weeks` weeks starting at `start_date`.

    Week types are drawn per 13-week season block and day types per week,
    each shuffled by the seeded RNG; a partial trailing season uses the
    leading part of its shuffled block.
    """
    if weeks < 1:
        raise ValueError("weeks must be at least 1")
    if bodyweight <= 0:
        raise ValueError("bodyweight must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    week_types: list[str] = []
    while len(week_types) < weeks:
        season = _season_of_week(len(week_types))
        block = [wt for wt, n in zip(WEEK_TYPES, SEASON_COMPOSITION[season])
                 for _ in range(n)]
        week_types.extend(_shuffled(block, rng))
    week_types = week_types[:weeks]

    events: list = []
    day_labels: list[str] = []
    for w, week_type in enumerate(week_types):
        season = _season_of_week(w)
        day_block = [dt for dt, n in zip(DAY_TYPES, WEEK_COMPOSITION[week_type])
                     for _ in range(n)]
        for d, day_type in enumerate(_shuffled(day_block, rng)):
            day_start = (w * DAYS_PER_WEEK + d) * MINUTES_PER_DAY
            events.extend(_day_events(day_type, season, day_start, config))
            day_labels.append(day_type)

    events.sort(key=lambda e: (e.time_min if isinstance(e, MealEvent) else e.start_min,
                               isinstance(e, ExerciseEvent)))
    return Scenario(
        start_date=start_date,
        events=tuple(events),
        day_labels=tuple(day_labels),
        week_labels=tuple(week_types),
        season_labels=tuple(_season_of_week(w) for w in range(weeks)),
        bodyweight=bodyweight,
        config=config,
    )


@dataclass(frozen=True)
class ZohSeries:
    """Per-interval disturbance sequence on the control grid."""

    ts_min: float
    carb_rate: np.ndarray        # g CHO/min during each interval
    announced_grams: np.ndarray  # g CHO announced at the interval start
    exercise: np.ndarray         # intensity fraction during each interval

    @property
    def n_intervals(self) -> int:
        return len(self.carb_rate)

    def total_grams(self) -> float:
        return float(np.sum(self.carb_rate) * self.ts_min)


def to_zoh_series(scenario: Scenario, ts_min: float = 5.0,
                  n_intervals: int | None = None) -> ZohSeries:
    """Convert events to zero-order-hold inputs on the sampling grid.

    Each meal's mass is spread uniformly over its consumption duration
    (rounded up to whole intervals) starting at the interval containing the
    event time; announced meals report their full mass at the first
    interval.  Events starting at or beyond `n_intervals` are dropped.
    """
    cfg = scenario.config
    if n_intervals is None:
        last = 0.0
        for e in scenario.events:
            if isinstance(e, MealEvent):
                last = max(last, e.time_min + cfg.consumption_duration_min)
            else:
                last = max(last, e.start_min + e.duration_min)
        n_intervals = int(math.ceil(last / ts_min)) + 1

    carb = np.zeros(n_intervals)
    announced = np.zeros(n_intervals)
    exercise = np.zeros(n_intervals)
    n_consume = max(1, int(math.ceil(cfg.consumption_duration_min / ts_min)))

    for event in scenario.events:
        if isinstance(event, MealEvent):
            k0 = int(event.time_min // ts_min)
            if k0 >= n_intervals:
                continue
            grams = event.grams_per_kg * scenario.bodyweight
            rate = grams / (n_consume * ts_min)
            for k in range(k0, min(k0 + n_consume, n_intervals)):
                carb[k] += rate
            if event.announced:
                announced[k0] += grams
        else:
            k0 = int(event.start_min // ts_min)
            k1 = k0 + max(1, int(math.ceil(event.duration_min / ts_min)))
            for k in range(k0, min(k1, n_intervals)):
                if k >= 0 and event.intensity > exercise[k]:
                    exercise[k] = event.intensity
    return ZohSeries(ts_min=ts_min, carb_rate=carb,
                     announced_grams=announced, exercise=exercise)


def scenario_to_lines(scenario: Scenario) -> str:
    """Line-oriented event export for inspection and replay.

    One event per line: ``MEAL <time_min> <grams_per_kg> <announced>`` or
    ``EXERCISE <start_min> <duration_min> <intensity>``, preceded by header
    comments carrying the start date and bodyweight.
    """
    lines = [
        "# apsim scenario v1",
        f"# start_date {scenario.start_date.isoformat()}",
        f"# bodyweight_kg {scenario.bodyweight!r}",
    ]
    for e in scenario.events:
        if isinstance(e, MealEvent):
            lines.append(f"MEAL {e.time_min!r} {e.grams_per_kg!r} {int(e.announced)}")
        else:
            lines.append(f"EXERCISE {e.start_min!r} {e.duration_min!r} {e.intensity!r}")
    return "\n".join(lines) + "\n"


def scenario_from_lines(text: str) -> Scenario:
    """Parse the event export back into a replayable scenario.

    Labels and config are not round-tripped; only the event timeline,
    start date, and bodyweight are.
    """
    start_date = None
    bodyweight = None
    events = []
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("# start_date"):
            start_date = datetime.date.fromisoformat(line.split()[-1])
        elif line.startswith("# bodyweight_kg"):
            bodyweight = float(line.split()[-1])
        elif line.startswith("MEAL"):
            _, t, g, a = line.split()
            events.append(MealEvent(float(t), float(g), bool(int(a))))
        elif line.startswith("EXERCISE"):
            _, t, dur, inten = line.split()
            events.append(ExerciseEvent(float(t), float(dur), float(inten)))
    if start_date is None or bodyweight is None:
        raise ValueError("scenario export is missing its header lines")
    return Scenario(start_date=start_date, events=tuple(events),
                    day_labels=(), week_labels=(), season_labels=(),
                    bodyweight=bodyweight, config=DEFAULT_CONFIG)
