"""Least-squares estimation of contact and recovery rates from daily fractions.

The one-day map is linear in the parameter vector x = (A row-major, gamma),
so stacking its increments over a window gives C x = d. Estimates solve the
non-negative least-squares problem, optionally pulled towards the previous
phase's estimate.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, NumericalError
from .model_core import (
    GroupFractions,
    ModelParams,
    Trajectory,
    _rhs,
    iterate_discrete,
    unpack_x,
)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_LAMBDA_REG = 1e-5


@dataclass(frozen=True)
class RegressionSystem:
    C: np.ndarray
    d: np.ndarray
    m: int
    start_day: int
    end_day: int
    # x layout: A row-major, then gamma
    layout: str = "A_rowmajor+gamma"

    @property
    def degenerate(self) -> bool:
        return not np.any(self.C)


@dataclass(frozen=True)
class NnlsReport:
    x: np.ndarray
    residual_norm: float
    kkt_residual: float
    iterations: int
    degenerate: bool = False

    def params(self, m: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        return unpack_x(self.x, m)


@dataclass(frozen=True)
class PhaseEstimate:
    phase_index: int
    start_day: int
    end_day: int
    report: NnlsReport

    def to_dict(self) -> Dict[str, Any]:
        A, gamma = self.report.params()
        return {
            "phase_index": self.phase_index,
            "start_day": self.start_day,
            "end_day": self.end_day,
            "A": A.tolist(),
            "gamma": gamma.tolist(),
            "residual_norm": self.report.residual_norm,
            "kkt_residual": self.report.kkt_residual,
            "degenerate": self.report.degenerate,
        }


def build_regression(traj: Trajectory, window: Tuple[int, int]) -> RegressionSystem:
    """Stack the one-day increments of days k0 <= k < k1 into C x = d.

    Rows run over (day, group, compartment) with compartments in s, beta, r
    order. The s-row carries -s_i beta_j on A_ij, the beta-row +s_i beta_j
    on A_ij and -beta_i on gamma_i, the r-row +beta_i on gamma_i.
    """
    k0, k1 = int(window[0]), int(window[1])
    if k1 <= k0:
        raise InputError(f"empty regression window [{k0}, {k1})")
    try:
        i0, i1 = traj.index_of(k0), traj.index_of(k1)
    except InputError as exc:
        raise InputError(f"window [{k0}, {k1}) is outside the trajectory: {exc}") from exc
    if not np.allclose(np.diff(traj.times[i0:i1 + 1]), 1.0, atol=1e-9):
        raise InputError("regression needs samples spaced exactly one day apart")

    m = traj.m
    W = i1 - i0
    s = traj.s[i0:i1]
    beta = traj.beta[i0:i1]
    contact = s[:, :, None] * beta[:, None, :]

    C = np.zeros((W, m, 3, m * m + m))
    for i in range(m):
        block = slice(i * m, (i + 1) * m)
        C[:, i, 0, block] = -contact[:, i, :]
        C[:, i, 1, block] = contact[:, i, :]
        C[:, i, 1, m * m + i] = -beta[:, i]
        C[:, i, 2, m * m + i] = beta[:, i]
    d = np.diff(traj.values[i0:i1 + 1], axis=0).transpose(0, 2, 1)
    return RegressionSystem(C=C.reshape(3 * m * W, -1), d=d.reshape(-1), m=m, start_day=k0, end_day=k1)


def kkt_residual(C: np.ndarray, d: np.ndarray, x: np.ndarray) -> float:
    """Largest violation of the NNLS optimality conditions at ``x``."""
    g = C.T @ (C @ x - d)
    positive = x > 0
    violation = np.where(positive, np.abs(g), np.maximum(-g, 0.0))
    return float(violation.max(initial=0.0))


def _check_system(C: Any, d: Any) -> Tuple[np.ndarray, np.ndarray]:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    if C.shape[0] != d.shape[0]:
        raise InputError(f"C has {C.shape[0]} rows but d has {d.shape[0]} entries")
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(d))):
        raise InputError("non-finite entry in the regression system")
    return C, d


def nnls(C: Any, d: Any, tol: float = DEFAULT_TOL, max_iter: Optional[int] = None) -> NnlsReport:
    """Lawson-Hanson active-set solution of min ||C x - d|| subject to x >= 0.

    Columns are normalised and d rescaled before the solve so the stopping
    rule does not depend on the magnitude of the data; the KKT residual is
    reported in the original units.
    """
    C, d = _check_system(C, d)
    ncols = C.shape[1]
    max_iter = 10 * ncols if max_iter is None else max_iter
    x = np.zeros(ncols)
    if not np.any(C) or not np.any(d):
        return NnlsReport(x, float(np.linalg.norm(d)), kkt_residual(C, d, x), 0, degenerate=not np.any(C))

    col_norms = np.linalg.norm(C, axis=0)
    live = col_norms > 0
    scale = float(np.linalg.norm(d))
    Cs = np.zeros_like(C)
    Cs[:, live] = C[:, live] / col_norms[live]
    ds = d / scale
    inner_tol = tol / max(1.0, scale * float(col_norms.max()))

    z_scaled = np.zeros(ncols)
    passive = np.zeros(ncols, dtype=bool)
    w = Cs.T @ ds
    iterations = 0
    while True:
        candidates = ~passive & live & (w > inner_tol)
        if not np.any(candidates):
            break
        if iterations >= max_iter:
            raise NumericalError(f"nnls hit its iteration cap ({max_iter}) before the KKT conditions held")
        iterations += 1
        t = int(np.argmax(np.where(candidates, w, -np.inf)))
        passive[t] = True

        while True:
            z = np.zeros(ncols)
            z[passive] = np.linalg.lstsq(Cs[:, passive], ds, rcond=None)[0]
            if np.all(z[passive] > 0):
                z_scaled = z
                break
            if z[t] <= 0 and z_scaled[t] == 0:
                # the new column cannot enter; drop it for this gradient
                passive[t] = False
                w[t] = 0.0
                z = None
                break
            if iterations >= max_iter:
                raise NumericalError(f"nnls hit its iteration cap ({max_iter}) before the KKT conditions held")
            iterations += 1
            blocking = passive & (z <= 0)
            alpha = np.min(z_scaled[blocking] / (z_scaled[blocking] - z[blocking]))
            z_scaled = z_scaled + alpha * (z - z_scaled)
            passive &= z_scaled > 1e-15
            z_scaled[~passive] = 0.0
        if z is None:
            continue
        w = Cs.T @ (ds - Cs @ z_scaled)

    x = np.zeros(ncols)
    x[live] = z_scaled[live] * scale / col_norms[live]
    report = NnlsReport(
        x=x,
        residual_norm=float(np.linalg.norm(C @ x - d)),
        kkt_residual=kkt_residual(C, d, x),
        iterations=iterations,
    )
    if report.kkt_residual > tol:
        logger.warning("nnls finished with KKT residual %.3g above tol %.3g", report.kkt_residual, tol)
    return report


def nnls_regularized(C: Any, d: Any, x_prev: Any, lambda_reg: float = DEFAULT_LAMBDA_REG,
                     tol: float = DEFAULT_TOL) -> NnlsReport:
    """min ||C x - d||^2 + lambda_reg ||x - x_prev||^2 over x >= 0, via an augmented nnls."""
    C, d = _check_system(C, d)
    x_prev = np.asarray(x_prev, dtype=float).ravel()
    if lambda_reg < 0:
        raise InputError("lambda_reg must be >= 0")
    if x_prev.shape != (C.shape[1],) or np.any(x_prev < 0):
        raise InputError("x_prev must be a nonnegative vector with one entry per column of C")
    if lambda_reg == 0:
        return nnls(C, d, tol=tol)
    root = np.sqrt(lambda_reg)
    stacked = nnls(
        np.vstack([C, root * np.eye(C.shape[1])]),
        np.concatenate([d, root * x_prev]),
        tol=tol,
    )
    return NnlsReport(
        x=stacked.x,
        residual_norm=float(np.linalg.norm(C @ stacked.x - d)),
        kkt_residual=stacked.kkt_residual,
        iterations=stacked.iterations,
        degenerate=not np.any(C),
    )


def _free_run(x: np.ndarray, anchor: np.ndarray, W: int) -> np.ndarray:
    """Unchecked W-day iteration of the map; may leave the simplex for bad x."""
    A, gamma = unpack_x(x, anchor.shape[1])
    out = np.empty((W + 1,) + anchor.shape)
    out[0] = anchor
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(W):
            out[k + 1] = out[k] + _rhs(A, gamma, out[k])
    return out


def generated_trajectory(params_x: Any, anchor: GroupFractions, W: int) -> Trajectory:
    x = np.asarray(params_x, dtype=float)
    if np.any(x < 0):
        raise InputError("parameter vector must be nonnegative")
    A, gamma = unpack_x(x, anchor.m)
    return iterate_discrete(ModelParams.for_ode(A, gamma), anchor, W)


def mean_square_error(data: Any, generated: Any) -> float:
    """Average squared deviation over every (day, compartment, group) entry."""
    data = data.values if isinstance(data, Trajectory) else np.asarray(data, dtype=float)
    generated = generated.values if isinstance(generated, Trajectory) else np.asarray(generated, dtype=float)
    if data.shape != generated.shape:
        raise InputError(f"shape mismatch: {data.shape} vs {generated.shape}")
    return float(np.mean((generated - data) ** 2))


def mse(window: Trajectory, params_x: Any) -> float:
    """Error of a free run from the window's first observed day against the window."""
    x = np.asarray(params_x, dtype=float)
    generated = _free_run(x, window.values[0], len(window) - 1)
    with np.errstate(over="ignore", invalid="ignore"):
        value = mean_square_error(window.values, generated)
    return value if np.isfinite(value) else float("inf")


def phase_spans(data: Trajectory, boundaries: Sequence[float]) -> List[Tuple[int, int]]:
    """Split the data timeline at ``boundaries`` into [start, end] day spans."""
    start, end = int(round(data.times[0])), int(round(data.times[-1]))
    cuts = [int(round(b)) for b in boundaries]
    if any(not start < b < end for b in cuts) or any(b2 <= b1 for b1, b2 in zip(cuts, cuts[1:])):
        raise InputError(f"boundaries {cuts} must be strictly increasing inside ({start}, {end})")
    edges = [start] + cuts + [end]
    return list(zip(edges[:-1], edges[1:]))


def estimate_per_phase(data: Trajectory, phases: Any = (), lambda_reg: float = DEFAULT_LAMBDA_REG,
                       tol: float = DEFAULT_TOL) -> List[PhaseEstimate]:
    """Fit each phase in turn; later phases are regularised towards their predecessor.

    ``phases`` is a PhaseSet or a plain sequence of boundary days.
    """
    boundaries = getattr(phases, "boundaries", phases)
    estimates: List[PhaseEstimate] = []
    for idx, (start, end) in enumerate(phase_spans(data, boundaries)):
        if end - start < 2:
            raise InputError(f"phase {idx + 1} ([{start}, {end}]) is shorter than 2 days")
        system = build_regression(data, (start, end))
        if idx == 0:
            report = nnls(system.C, system.d, tol=tol)
        else:
            report = nnls_regularized(system.C, system.d, estimates[-1].report.x, lambda_reg, tol=tol)
        if report.degenerate:
            logger.warning("phase %d has no infections in [%d, %d]; estimate is not identifiable", idx + 1, start, end)
        logger.info("phase %d [%d, %d]: residual %.3g, %d iterations", idx + 1, start, end,
                    report.residual_norm, report.iterations)
        estimates.append(PhaseEstimate(phase_index=idx + 1, start_day=start, end_day=end, report=report))
    return estimates


def fitted_trajectory(data: Trajectory, estimates: Sequence[PhaseEstimate]) -> Tuple[Trajectory, float]:
    """Stitch per-phase free runs, each anchored at the observed first day of its phase.

    Returns the model-generated trajectory over the whole timeline and its
    mean-square error against the data.
    """
    if not estimates:
        raise InputError("no phase estimates to stitch")
    values = np.empty_like(data.values)
    i0 = data.index_of(estimates[0].start_day)
    for est in estimates:
        a, b = data.index_of(est.start_day), data.index_of(est.end_day)
        run = generated_trajectory(est.report.x, data.state(a), b - a)
        values[a:b + 1] = run.values
    i1 = data.index_of(estimates[-1].end_day)
    fitted = Trajectory(data.times[i0:i1 + 1], values[i0:i1 + 1])
    return fitted, mean_square_error(data.values[i0:i1 + 1], fitted.values)


@dataclass(frozen=True)
class GroupRanking:
    susceptibility: np.ndarray
    infectiousness: np.ndarray

    @property
    def most_susceptible(self) -> List[int]:
        return np.argsort(-self.susceptibility, kind="stable").tolist()

    @property
    def most_infectious(self) -> List[int]:
        return np.argsort(-self.infectiousness, kind="stable").tolist()


def group_rankings(A: Any) -> GroupRanking:
    """Row sums of A (contact rate received) and column sums (contact rate emitted)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("A must be a square matrix")
    return GroupRanking(susceptibility=A.sum(axis=1), infectiousness=A.sum(axis=0))


def daily_new_cases(traj: Trajectory, populations: Sequence[float]) -> np.ndarray:
    """New infections per day and group, in people; row k covers day k to k+1."""
    total = float(np.sum(populations))
    if total <= 0:
        raise InputError("populations must sum to a positive number")
    return -np.diff(traj.s, axis=0) * total


__all__ = [
    "GroupRanking",
    "NnlsReport",
    "PhaseEstimate",
    "RegressionSystem",
    "build_regression",
    "daily_new_cases",
    "estimate_per_phase",
    "fitted_trajectory",
    "generated_trajectory",
    "group_rankings",
    "kkt_residual",
    "mean_square_error",
    "mse",
    "nnls",
    "nnls_regularized",
    "phase_spans",
]
