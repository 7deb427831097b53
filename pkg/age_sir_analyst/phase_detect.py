"""Sliding-window detection of contact-rate phase boundaries.

For each window start p the unconstrained fit of [p, p+w) is compared with
a fit forced to stay within ``eps * ||x_prev||`` of the previous window's
unconstrained fit. When forcing the old parameters changes the free-run
error by more than a factor ``delta``, p is flagged; flagged days closer
than ``min_phase`` to the last kept boundary are merged away.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InputError, NumericalError
from .estimation import DEFAULT_TOL, NnlsReport, build_regression, kkt_residual, mse, nnls
from .model_core import Trajectory
from .settings import AgeSirSettings

logger = logging.getLogger(__name__)

ZERO_ERROR_GAP = 1e-15


class PhaseConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w: int = Field(30, description="window length, days")
    dp: int = Field(5, description="window step, days")
    eps: float = Field(1e-4, gt=0, description="constraint radius as a fraction of ||x_prev||")
    delta: float = Field(3.0, gt=0, description="error-ratio threshold")
    min_phase: int = Field(20, ge=0, description="phases this short or shorter are merged")

    @model_validator(mode="after")
    def _window_after_step(self) -> "PhaseConfig":
        if not self.w > self.dp > 0:
            raise ValueError(f"need w > dp > 0, got w={self.w}, dp={self.dp}")
        return self

    @classmethod
    def from_settings(cls, settings: AgeSirSettings, **overrides: Any) -> "PhaseConfig":
        values = dict(w=settings.window, dp=settings.step, eps=settings.eps,
                      delta=settings.delta, min_phase=settings.min_phase)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class WindowResult:
    p: int
    E_a: float
    E_b: float
    ratio: float
    flagged: bool
    x_a: np.ndarray = field(repr=False)
    x_b: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {"p": self.p, "E_a": self.E_a, "E_b": self.E_b, "ratio": self.ratio, "flagged": self.flagged}


@dataclass(frozen=True)
class PhaseSet:
    boundaries: Tuple[int, ...]
    flagged: Tuple[int, ...] = ()
    windows: Tuple[WindowResult, ...] = ()
    start_day: int = 0
    end_day: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "start_day": self.start_day,
            "end_day": self.end_day,
            "boundaries": list(self.boundaries),
            "flagged": list(self.flagged),
            "windows": [w.to_dict() for w in self.windows],
        }


def project_feasible(v: np.ndarray, center: np.ndarray, radius: float,
                     max_iter: int = 500, tol: float = 1e-14) -> np.ndarray:
    """Dykstra's alternating projection onto {x >= 0} intersected with the ball B(center, radius)."""

    def to_ball(y: np.ndarray) -> np.ndarray:
        gap = y - center
        dist = np.linalg.norm(gap)
        return y if dist <= radius else center + gap * (radius / dist)

    x = np.asarray(v, dtype=float)
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        y = to_ball(x + p)
        p = x + p - y
        x_new = np.maximum(y + q, 0.0)
        q = y + q - x_new
        done = np.linalg.norm(x_new - x) <= tol * (1.0 + np.linalg.norm(x))
        x = x_new
        if done:
            break
    # with center >= 0, clamping a ball point only moves it closer to the center
    return np.maximum(to_ball(x), 0.0)


def solve_constrained(C: Any, d: Any, center: Any, radius: float, tol: float = 1e-12,
                      max_iter: int = 5000) -> NnlsReport:
    """min ||C x - d||^2 over x >= 0 with ||x - center|| <= radius.

    Accelerated projected gradient (FISTA) with step 1/||C||^2, warm-started
    at the projection of the unconstrained nnls solution.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    center = np.asarray(center, dtype=float).ravel()
    if radius < 0 or np.any(center < 0):
        raise InputError("solve_constrained needs radius >= 0 and a nonnegative center")
    if center.shape != (C.shape[1],):
        raise InputError("center must have one entry per column of C")

    lipschitz = float(np.linalg.norm(C, 2) ** 2)
    if radius == 0 or lipschitz == 0:
        x = project_feasible(center, center, radius)
        return NnlsReport(x, float(np.linalg.norm(C @ x - d)), kkt_residual(C, d, x), 0, degenerate=lipschitz == 0)

    x_prev = project_feasible(nnls(C, d).x, center, radius)
    y = x_prev
    momentum = 1.0
    for iteration in range(1, max_iter + 1):
        grad = C.T @ (C @ y - d)
        x = project_feasible(y - grad / lipschitz, center, radius)
        if np.linalg.norm(x - x_prev) <= tol * (1.0 + np.linalg.norm(x_prev)):
            break
        nxt = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2))
        y = x + ((momentum - 1.0) / nxt) * (x - x_prev)
        x_prev, momentum = x, nxt
    else:
        logger.debug("solve_constrained stopped at max_iter=%d", max_iter)

    if np.linalg.norm(x - center) > radius * (1 + 1e-9) + 1e-15 or np.any(x < -1e-12):
        raise NumericalError("constrained solve ended outside the feasible set")
    return NnlsReport(x, float(np.linalg.norm(C @ x - d)), kkt_residual(C, d, x), iteration)


def _unconstrained_window(data: Trajectory, start: int, w: int, tol: float) -> Tuple[np.ndarray, float]:
    system = build_regression(data, (start, start + w))
    report = nnls(system.C, system.d, tol=tol)
    return report.x, mse(data.window(start, start + w), report.x)


def error_ratio(E_a: float, E_b: float) -> float:
    if abs(E_b - E_a) <= ZERO_ERROR_GAP:
        return 0.0
    if E_a == 0:
        return float("inf")
    return abs(E_b - E_a) / E_a


def merge_short_phases(flagged: List[int], start: int, min_phase: int) -> List[int]:
    """Drop, left to right, every boundary within ``min_phase`` days of the last kept one."""
    kept: List[int] = []
    phase_start = start
    for day in sorted(flagged):
        if day - phase_start <= min_phase:
            continue
        kept.append(day)
        phase_start = day
    return kept


def detect_phases(data: Trajectory, cfg: Optional[PhaseConfig] = None, n_jobs: int = 1,
                  tol: float = DEFAULT_TOL) -> PhaseSet:
    cfg = cfg or PhaseConfig()
    t0 = int(round(data.times[0]))
    span = int(round(data.times[-1])) - t0
    if span < cfg.w + cfg.dp:
        raise InputError(f"data covers {span} days; phase detection needs at least w + dp = {cfg.w + cfg.dp}")

    offsets = list(range(0, span - cfg.w + 1, cfg.dp))
    unconstrained = Parallel(n_jobs=n_jobs)(
        delayed(_unconstrained_window)(data, t0 + p, cfg.w, tol) for p in offsets
    )

    windows: List[WindowResult] = []
    for idx in range(1, len(offsets)):
        start = t0 + offsets[idx]
        x_a, E_a = unconstrained[idx]
        center = unconstrained[idx - 1][0]
        system = build_regression(data, (start, start + cfg.w))
        constrained = solve_constrained(system.C, system.d, center, cfg.eps * float(np.linalg.norm(center)))
        E_b = mse(data.window(start, start + cfg.w), constrained.x)
        ratio = error_ratio(E_a, E_b)
        windows.append(WindowResult(start, E_a, E_b, ratio, ratio > cfg.delta, x_a, constrained.x))
        logger.debug("window p=%d: E_a=%.3g E_b=%.3g ratio=%.3g", start, E_a, E_b, ratio)

    flagged = [w.p for w in windows if w.flagged]
    boundaries = merge_short_phases(flagged, t0, cfg.min_phase)
    logger.info("phase detection: %d windows, %d flagged, boundaries %s", len(windows), len(flagged), boundaries)
    return PhaseSet(boundaries=tuple(boundaries), flagged=tuple(flagged), windows=tuple(windows),
                    start_day=t0, end_day=t0 + span)
