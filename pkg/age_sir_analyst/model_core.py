"""Age-structured SIR model: parameter and state types, the ODE and its 1-day discretisation."""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InputError, NumericalError, ParameterError

logger = logging.getLogger(__name__)

# negatives down to -NEGATIVE_TOL are rounding noise and get clamped to 0
NEGATIVE_TOL = 1e-12
MASS_TOL = 1e-9
COMPARTMENTS = ("s", "beta", "r")


@dataclass(frozen=True)
class ModelParams:
    """Rates of the age-structured model, all per day.

    ``A`` alone is enough for the ODE and the discrete map. Network
    simulation also needs ``B``, ``rho`` and ``group_sizes``.
    """

    A: np.ndarray
    gamma: np.ndarray
    lambda_edge: float = 1.0
    B: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    group_sizes: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def has_network(self) -> bool:
        return self.B is not None and self.rho is not None and self.group_sizes is not None

    @property
    def n(self) -> int:
        if self.group_sizes is None:
            raise ParameterError("group_sizes are required for network simulation")
        return int(self.group_sizes.sum())

    def edge_prob(self) -> np.ndarray:
        """rho_ij / n, the stationary probability that an ordered pair is connected."""
        if not self.has_network:
            raise ParameterError("B, rho and group_sizes are required for network simulation")
        return self.rho / self.n

    @classmethod
    def for_ode(cls, A: Any, gamma: Any) -> "ModelParams":
        return validate_params({"A": A, "gamma": gamma})

    def with_lambda(self, lambda_edge: float) -> "ModelParams":
        return validate_params(replace(self, lambda_edge=lambda_edge))

    def with_group_sizes(self, group_sizes: Sequence[int]) -> "ModelParams":
        return validate_params(replace(self, group_sizes=np.asarray(group_sizes)))


def _as_matrix(name: str, value: Any, m: int) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != (m, m):
        raise ParameterError(f"dimension mismatch: {name} has shape {arr.shape}, expected {(m, m)}")
    return arr


def _as_vector(name: str, value: Any, m: int) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != (m,):
        raise ParameterError(f"dimension mismatch: {name} has shape {arr.shape}, expected {(m,)}")
    return arr


def validate_params(raw: Union[Mapping[str, Any], ModelParams]) -> ModelParams:
    """Build a ModelParams from a mapping (or re-check an existing one).

    Accepted keys: ``m``, ``A``, ``B``, ``rho``, ``gamma``, ``lambda_edge``,
    ``group_sizes``. When ``A`` is missing it is derived as ``rho * B``.
    """
    if isinstance(raw, ModelParams):
        raw = {
            "A": raw.A,
            "B": raw.B,
            "rho": raw.rho,
            "gamma": raw.gamma,
            "lambda_edge": raw.lambda_edge,
            "group_sizes": raw.group_sizes,
        }
    get = raw.get

    if get("gamma") is None:
        raise ParameterError("dimension mismatch: gamma is required")
    if get("m") is not None:
        m = int(get("m"))
    elif get("A") is not None:
        m = len(get("A"))
    elif get("B") is not None:
        m = len(get("B"))
    else:
        m = len(get("gamma"))
    if m < 1:
        raise ParameterError("dimension mismatch: m must be a positive integer")

    gamma = _as_vector("gamma", get("gamma"), m)
    B = _as_matrix("B", get("B"), m) if get("B") is not None else None
    rho = _as_matrix("rho", get("rho"), m) if get("rho") is not None else None
    if (B is None) != (rho is None):
        raise ParameterError("B and rho must be given together")
    if get("A") is not None:
        A = _as_matrix("A", get("A"), m)
    elif B is not None:
        A = rho * B
    else:
        raise ParameterError("either A or both B and rho are required")

    lambda_edge = float(get("lambda_edge") if get("lambda_edge") is not None else 1.0)

    for name, arr in (("A", A), ("B", B), ("rho", rho), ("gamma", gamma)):
        if arr is None:
            continue
        if not np.all(np.isfinite(arr)):
            raise ParameterError(f"non-finite entry in {name}")
        if np.any(arr < 0):
            raise ParameterError(f"negative entry in {name}")
    if not math.isfinite(lambda_edge) or lambda_edge <= 0:
        raise ParameterError("lambda_edge must be a positive finite rate")

    if B is not None and not np.allclose(A, rho * B, rtol=1e-12, atol=1e-12):
        raise ParameterError("A != rho * B beyond tolerance 1e-12")

    group_sizes = None
    if get("group_sizes") is not None:
        sizes = _as_vector("group_sizes", get("group_sizes"), m)
        if np.any(sizes <= 0) or np.any(sizes != np.round(sizes)):
            raise ParameterError("group_sizes must be positive integers")
        group_sizes = sizes.astype(np.int64)
        if rho is not None and np.any(rho / group_sizes.sum() > 1):
            raise ParameterError("rho/n > 1: edge probability exceeds one")

    for arr in (A, B, rho, gamma, group_sizes):
        if arr is not None:
            arr.setflags(write=False)
    return ModelParams(A=A, gamma=gamma, lambda_edge=lambda_edge, B=B, rho=rho, group_sizes=group_sizes)


def pack_x(A: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Parameter vector layout shared with estimation: A row-major, then gamma."""
    return np.concatenate([np.asarray(A, dtype=float).ravel(), np.asarray(gamma, dtype=float)])


def unpack_x(x: np.ndarray, m: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if m is None:
        m = int(round((math.sqrt(1 + 4 * len(x)) - 1) / 2))
    if len(x) != m * m + m:
        raise InputError(f"parameter vector of length {len(x)} does not match m={m}")
    return x[: m * m].reshape(m, m), x[m * m:]


def check_fractions(values: np.ndarray, error: type = NumericalError, where: str = "") -> np.ndarray:
    """Clamp rounding negatives and enforce the GroupFractions invariants.

    ``values`` has shape (..., 3, m). Returns a clamped copy.
    """
    values = np.array(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise error(f"non-finite state{where}")
    if np.any(values < -NEGATIVE_TOL):
        raise error(f"negative compartment {values.min():.3g}{where}")
    values[values < 0] = 0.0
    mass = values.sum(axis=(-2, -1))
    if np.any(np.abs(mass - 1.0) > MASS_TOL):
        worst = float(np.max(np.abs(mass - 1.0)))
        raise error(f"fractions do not sum to 1 (off by {worst:.3g}){where}")
    return values


@dataclass(frozen=True)
class GroupFractions:
    """Per-group (s, beta, r) as fractions of the TOTAL population."""

    s: np.ndarray
    beta: np.ndarray
    r: np.ndarray

    @property
    def m(self) -> int:
        return len(self.s)

    def as_array(self) -> np.ndarray:
        return np.stack([self.s, self.beta, self.r])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GroupFractions":
        arr = np.asarray(arr, dtype=float)
        return cls(s=arr[0].copy(), beta=arr[1].copy(), r=arr[2].copy())

    @classmethod
    def build(cls, s: Any, beta: Any, r: Any = None) -> "GroupFractions":
        s = np.atleast_1d(np.asarray(s, dtype=float))
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        r = np.zeros_like(s) if r is None else np.atleast_1d(np.asarray(r, dtype=float))
        if not (s.shape == beta.shape == r.shape) or s.ndim != 1:
            raise InputError("s, beta and r must be vectors of equal length")
        return cls.from_array(check_fractions(np.stack([s, beta, r]), error=InputError))

    def total(self) -> float:
        return float(self.as_array().sum())


def initial_fractions(group_sizes: Sequence[int], infected: Sequence[int],
                      recovered: Optional[Sequence[int]] = None) -> GroupFractions:
    sizes = np.asarray(group_sizes, dtype=float)
    infected = np.asarray(infected, dtype=float)
    recovered = np.zeros_like(sizes) if recovered is None else np.asarray(recovered, dtype=float)
    n = sizes.sum()
    return GroupFractions.build((sizes - infected - recovered) / n, infected / n, recovered / n)


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped sequence of group fractions. ``values`` has shape (T, 3, m)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise InputError("trajectory needs a non-empty 1-d time vector")
        if values.ndim != 3 or values.shape[0] != len(times) or values.shape[1] != 3:
            raise InputError(f"trajectory values have shape {values.shape}, expected ({len(times)}, 3, m)")
        if np.any(np.diff(times) <= 0):
            raise InputError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", check_fractions(values))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def m(self) -> int:
        return self.values.shape[2]

    @property
    def s(self) -> np.ndarray:
        return self.values[:, 0, :]

    @property
    def beta(self) -> np.ndarray:
        return self.values[:, 1, :]

    @property
    def r(self) -> np.ndarray:
        return self.values[:, 2, :]

    def state(self, k: int) -> GroupFractions:
        return GroupFractions.from_array(self.values[k])

    @property
    def states(self) -> List[GroupFractions]:
        return [self.state(k) for k in range(len(self))]

    @property
    def final(self) -> GroupFractions:
        return self.state(len(self) - 1)

    def index_of(self, day: float) -> int:
        idx = int(np.searchsorted(self.times, day - 1e-9))
        if idx >= len(self.times) or abs(self.times[idx] - day) > 1e-9:
            raise InputError(f"day {day} is not a sample of the trajectory")
        return idx

    def window(self, start_day: float, end_day: float) -> "Trajectory":
        """Samples with start_day <= t <= end_day, both ends required to exist."""
        i0, i1 = self.index_of(start_day), self.index_of(end_day)
        return Trajectory(self.times[i0:i1 + 1], self.values[i0:i1 + 1])

    def to_frame(self) -> pd.DataFrame:
        columns = {"t": self.times}
        for i in range(self.m):
            for c, name in enumerate(COMPARTMENTS):
                columns[f"{name}_{i + 1}"] = self.values[:, c, i]
        return pd.DataFrame(columns)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Trajectory":
        if list(frame.columns[:1]) != ["t"] or (len(frame.columns) - 1) % 3 != 0:
            raise InputError("trajectory table must have columns t,s_1,beta_1,r_1,...")
        m = (len(frame.columns) - 1) // 3
        expected = ["t"] + [f"{name}_{i + 1}" for i in range(m) for name in COMPARTMENTS]
        if list(frame.columns) != expected:
            raise InputError(f"trajectory header mismatch: expected {','.join(expected)}")
        data = frame.to_numpy(dtype=float)
        values = data[:, 1:].reshape(len(frame), m, 3).transpose(0, 2, 1)
        try:
            return cls(data[:, 0], values)
        except NumericalError as exc:
            raise InputError(str(exc)) from exc


def _rhs(A: np.ndarray, gamma: np.ndarray, y: np.ndarray) -> np.ndarray:
    s, beta = y[0], y[1]
    ds = -s * (A @ beta)
    recovery = gamma * beta
    return np.stack([ds, -ds - recovery, recovery])


def ode_rhs(params: ModelParams, state: GroupFractions) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-hand side of the age-structured SIR ODE, returned as (ds, dbeta, dr)."""
    ds, dbeta, dr = _rhs(params.A, params.gamma, state.as_array())
    return ds, dbeta, dr


def _rk4_step(A: np.ndarray, gamma: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    k1 = _rhs(A, gamma, y)
    k2 = _rhs(A, gamma, y + 0.5 * h * k1)
    k3 = _rhs(A, gamma, y + 0.5 * h * k2)
    k4 = _rhs(A, gamma, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _clamped(y: np.ndarray, t: float) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite state at t={t:g}; parameters too large for this step")
    if np.any(y < -NEGATIVE_TOL):
        raise NumericalError(f"negative compartment {y.min():.3g} at t={t:g}")
    return np.maximum(y, 0.0)


def integrate_ode(params: ModelParams, init: GroupFractions, t_end: float, dt: float) -> Trajectory:
    """Classical fixed-step RK4, sampled every ``dt`` until the first sample >= t_end."""
    if dt <= 0 or t_end < 0:
        raise InputError("integrate_ode needs dt > 0 and t_end >= 0")
    steps = int(math.ceil(t_end / dt - 1e-9))
    times = dt * np.arange(steps + 1)
    out = np.empty((steps + 1, 3, init.m))
    y = init.as_array()
    out[0] = y
    for k in range(1, steps + 1):
        y = _clamped(_rk4_step(params.A, params.gamma, y, dt), times[k])
        out[k] = y
    return Trajectory(times, out)


def discrete_step(params: ModelParams, state: GroupFractions) -> GroupFractions:
    """One day of the explicit map: the Euler step of ode_rhs with h = 1."""
    return GroupFractions.from_array(_discrete(params.A, params.gamma, state.as_array(), 0))


def _discrete(A: np.ndarray, gamma: np.ndarray, y: np.ndarray, day: int) -> np.ndarray:
    nxt = y + _rhs(A, gamma, y)
    if np.any(nxt < -NEGATIVE_TOL):
        raise NumericalError(
            f"negative compartment {nxt.min():.3g} after day {day}: "
            "parameters too large for a 1-day explicit step"
        )
    return np.maximum(nxt, 0.0)


def iterate_discrete(params: ModelParams, init: GroupFractions, K: int) -> Trajectory:
    if K < 0:
        raise InputError("iterate_discrete needs K >= 0")
    out = np.empty((K + 1, 3, init.m))
    out[0] = init.as_array()
    for k in range(K):
        out[k + 1] = _discrete(params.A, params.gamma, out[k], k)
    return Trajectory(np.arange(K + 1, dtype=float), out)
