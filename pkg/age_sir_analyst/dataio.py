"""File formats and the case-count preprocessing pipeline.

Input is a cumulative case-count CSV (``date,group_1,...,group_m``), one row
per consecutive day. Preprocessing smooths it with a centred moving average,
splits it into S, I, R counts under a fixed recovery delay, and divides by
the total population.
"""

import json
import logging
import os
import re
from dataclasses import dataclass
from datetime import date
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .ctmc_sim import EventRecord, SimMode
from .errors import InputError
from .model_core import GroupFractions, ModelParams, Trajectory, initial_fractions, validate_params

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
_COUNT = re.compile(r"^\d+$")
_NEGATIVE = re.compile(r"^-\d+(\.\d*)?$")
FLOAT_FORMAT = "%.17g"


# ------------- Config files -------------

def _validation_message(path: PathLike, exc: ValidationError) -> str:
    problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
    return f"{path}: {problems}"


def _read_json(path: PathLike) -> Any:
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})") from exc


class Scenario(BaseModel):
    """Model parameters plus the initial condition and run controls of one experiment."""

    model_config = ConfigDict(extra="forbid")

    m: int = Field(gt=0)
    group_sizes: List[int]
    gamma: List[float]
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    rho: Optional[List[List[float]]] = None
    lambda_edge: float = Field(1.0, gt=0)
    initial_infected: List[int]
    initial_recovered: Optional[List[int]] = None
    t_end: float = Field(gt=0)
    sample_dt: float = Field(1.0, gt=0)
    ode_dt: float = Field(0.01, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    mode: SimMode = SimMode.LAZY

    @model_validator(mode="after")
    def _lengths(self) -> "Scenario":
        for name in ("group_sizes", "gamma", "initial_infected"):
            if len(getattr(self, name)) != self.m:
                raise ValueError(f"{name} must have length m={self.m}")
        if self.initial_recovered is not None and len(self.initial_recovered) != self.m:
            raise ValueError(f"initial_recovered must have length m={self.m}")
        if self.A is None and (self.B is None or self.rho is None):
            raise ValueError("give either A or both B and rho")
        return self

    def to_params(self) -> ModelParams:
        raw = self.model_dump(include={"m", "A", "B", "rho", "gamma", "lambda_edge", "group_sizes"})
        return validate_params({k: v for k, v in raw.items() if v is not None})

    def initial_state(self) -> GroupFractions:
        return initial_fractions(self.group_sizes, self.initial_infected, self.initial_recovered)


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    populations: List[int]
    T_R: int = Field(14, ge=0)
    smoothing_window: int = Field(15, ge=1)

    @field_validator("populations")
    @classmethod
    def _positive(cls, value: List[int]) -> List[int]:
        if not value or any(p <= 0 for p in value):
            raise ValueError("populations must be positive integers")
        return value

    @field_validator("smoothing_window")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("smoothing_window must be odd")
        return value


def load_scenario(path: PathLike) -> Scenario:
    try:
        return Scenario.model_validate(_read_json(path))
    except ValidationError as exc:
        raise InputError(_validation_message(path, exc)) from exc


def load_preprocess_config(path: PathLike, **overrides: Any) -> PreprocessConfig:
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise InputError(f"{path}: expected a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PreprocessConfig.model_validate(raw)
    except ValidationError as exc:
        raise InputError(_validation_message(path, exc)) from exc


# ------------- Cumulative case counts -------------

@dataclass(frozen=True)
class CumulativeSeries:
    """Cumulative infections per day (rows) and group (columns)."""

    dates: pd.DatetimeIndex
    counts: np.ndarray
    groups: List[str]
    populations: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.counts.shape[1]

    def with_counts(self, counts: np.ndarray) -> "CumulativeSeries":
        return CumulativeSeries(self.dates, counts, self.groups, self.populations)

    def with_populations(self, populations: Sequence[int]) -> "CumulativeSeries":
        populations = np.asarray(populations, dtype=np.int64)
        if populations.shape != (self.m,):
            raise InputError(f"{len(populations)} populations given for {self.m} groups")
        return CumulativeSeries(self.dates, self.counts, self.groups, populations)


def load_cumulative_csv(path: PathLike, populations: Optional[Sequence[int]] = None) -> CumulativeSeries:
    """Parse ``date,group_1,...`` with ISO dates on consecutive days and integer counts."""
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if len(frame.columns) < 2 or frame.columns[0] != "date":
        raise InputError(f"{path}:1: missing column; header must be date,group_1,...,group_m")
    if frame.empty:
        raise InputError(f"{path}: no data rows")

    groups = list(frame.columns[1:])
    counts = np.empty((len(frame), len(groups)), dtype=np.int64)
    dates = []
    for row, record in enumerate(frame.itertuples(index=False)):
        line = row + 2
        try:
            dates.append(pd.Timestamp(date.fromisoformat(record[0])))
        except ValueError as exc:
            raise InputError(f"{path}:{line}: malformed date {record[0]!r}") from exc
        for col, raw in enumerate(record[1:]):
            raw = raw.strip()
            if raw == "":
                raise InputError(f"{path}:{line}: missing column {groups[col]}")
            if _NEGATIVE.match(raw):
                raise InputError(f"{path}:{line}: negative count {raw} in {groups[col]}")
            if not _COUNT.match(raw):
                raise InputError(f"{path}:{line}: malformed count {raw!r} in {groups[col]}")
            counts[row, col] = int(raw)

    index = pd.DatetimeIndex(dates)
    steps = np.diff(index.values).astype("timedelta64[D]").astype(int) if len(index) > 1 else np.array([], dtype=int)
    bad = np.flatnonzero(steps != 1)
    if len(bad):
        k = bad[0]
        where = f"{path}:{k + 3}"
        if steps[k] == 0:
            raise InputError(f"{where}: duplicate date {index[k + 1].date()} (also on line {k + 2})")
        if steps[k] < 0:
            raise InputError(f"{where}: dates out of order ({index[k].date()} -> {index[k + 1].date()})")
        raise InputError(f"{where}: gap in dates ({index[k].date()} -> {index[k + 1].date()})")

    series = CumulativeSeries(index, counts, groups)
    logger.info("loaded %d days x %d groups from %s", len(index), len(groups), path)
    return series.with_populations(populations) if populations is not None else series


def moving_average(series: Any, window: int = 15) -> Any:
    """Centred moving average; days near the ends average over the truncated window.

    Accepts an array (days along axis 0) or a CumulativeSeries, and returns
    the same kind.
    """
    if window < 1 or window % 2 == 0:
        raise InputError("moving average window must be an odd integer >= 1")
    if isinstance(series, CumulativeSeries):
        return series.with_counts(moving_average(series.counts, window))
    values = np.asarray(series, dtype=float)
    smoothed = pd.DataFrame(values.reshape(len(values), -1)).rolling(window, center=True, min_periods=1).mean()
    return smoothed.to_numpy().reshape(values.shape)


@dataclass(frozen=True)
class SirCounts:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray


def decompose_sir(smoothed: CumulativeSeries, T_R: int = 14) -> tuple:
    """Split cumulative infections into S, I, R counts with recovery exactly T_R days after infection.

    Returns (SirCounts, Trajectory of fractions of the total population);
    trajectory days count from the first row.
    """
    if smoothed.populations is None:
        raise InputError("decompose_sir needs group populations")
    total = smoothed.counts.astype(float)
    K = len(total)
    if K < T_R:
        raise InputError(f"series covers {K} days, fewer than the recovery delay T_R={T_R}")
    pop = smoothed.populations.astype(float)
    over = np.argwhere(total > pop + 1e-9)
    if len(over):
        k, i = over[0]
        raise InputError(f"cumulative count exceeds population of {smoothed.groups[i]} on day {k}")

    lagged = np.zeros_like(total)
    lagged[T_R:] = total[:K - T_R]
    infected = total - lagged
    if np.any(infected < -1e-9):
        k, i = np.argwhere(infected < -1e-9)[0]
        raise InputError(f"negative infected count {infected[k, i]:.3g} in {smoothed.groups[i]} on day {k}; "
                         "cumulative series decreases over a recovery period")
    infected = np.maximum(infected, 0.0)
    counts = SirCounts(S=pop - total, I=infected, R=lagged)

    values = np.stack([counts.S, counts.I, counts.R], axis=1) / pop.sum()
    return counts, Trajectory(np.arange(K, dtype=float), values)


@dataclass(frozen=True)
class PreprocessResult:
    raw: CumulativeSeries
    smoothed: CumulativeSeries
    counts: SirCounts
    trajectory: Trajectory


def preprocess(path: PathLike, config: PreprocessConfig) -> PreprocessResult:
    raw = load_cumulative_csv(path, config.populations)
    smoothed = moving_average(raw, config.smoothing_window)
    counts, trajectory = decompose_sir(smoothed, config.T_R)
    return PreprocessResult(raw, smoothed, counts, trajectory)


# ------------- Trajectories, logs and result files -------------

def _ensure_parent(path: PathLike) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_trajectory_csv(traj: Trajectory, path: PathLike) -> str:
    _ensure_parent(path)
    traj.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("wrote %d samples to %s", len(traj), path)
    return os.fspath(path)


def read_trajectory_csv(path: PathLike) -> Trajectory:
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    checked = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = np.flatnonzero(checked.isna().any(axis=1).to_numpy())
    if len(bad_rows):
        raise InputError(f"{path}:{bad_rows[0] + 2}: malformed number")
    # the C parser's default float path can be off by one ulp
    numeric = pd.read_csv(path, float_precision="round_trip")
    try:
        return Trajectory.from_frame(numeric)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_event_log(events: Iterable[EventRecord], path: PathLike) -> str:
    _ensure_parent(path)
    frame = pd.DataFrame([e.as_row() for e in events], columns=["t", "kind", "node_or_pair", "detail"])
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return os.fspath(path)


def write_json(payload: Any, path: PathLike) -> str:
    _ensure_parent(path)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return os.fspath(path)


def write_table_csv(frame: pd.DataFrame, path: PathLike) -> str:
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return os.fspath(path)


def read_phases_json(path: PathLike) -> Dict[str, Any]:
    """A phases JSON as written by detect-phases, with integer boundary days."""
    payload = _read_json(path)
    if not isinstance(payload, dict) or not isinstance(payload.get("boundaries"), list):
        raise InputError(f"{path}: expected an object with a 'boundaries' list of days")
    if not all(isinstance(b, (int, float)) for b in payload["boundaries"]):
        raise InputError(f"{path}: boundaries must be day numbers")
    for key in ("start_day", "end_day"):
        if not isinstance(payload.get(key), (int, float)):
            raise InputError(f"{path}: missing {key}")
    payload["boundaries"] = [int(b) for b in payload["boundaries"]]
    return payload


def read_phase_boundaries(path: PathLike) -> List[int]:
    """Boundary days from a phases JSON, or from a bare JSON list of days."""
    payload = _read_json(path)
    if isinstance(payload, list) and all(isinstance(b, (int, float)) for b in payload):
        return [int(b) for b in payload]
    return read_phases_json(path)["boundaries"]


def read_estimates_json(path: PathLike) -> List[Dict[str, Any]]:
    payload = _read_json(path)
    if not isinstance(payload, list) or not all(isinstance(e, dict) and "A" in e and "gamma" in e for e in payload):
        raise InputError(f"{path}: expected a list of phase estimates with A and gamma")
    return payload
