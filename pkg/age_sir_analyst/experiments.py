"""Monte-Carlo checks of the network chain against its mean-field ODE.

* ``convergence_sweep``: mean-square distance between simulated and ODE
  fractions as the population and the edge-update rate grow together.
* ``converse_gap``: with the edge-update rate held fixed, the simulated
  susceptible fraction stays measurably above the ODE.
* ``edge_age_distribution`` / ``edge_density_check``: distributional facts
  about the edge process alone.

Every result records the base seed it was produced from.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from .ctmc_sim import EventKind, SimMode, ensemble, init_network, network_counts, simulate
from .errors import InputError
from .model_core import GroupFractions, ModelParams, Trajectory, initial_fractions, integrate_ode

logger = logging.getLogger(__name__)

ODE_MAX_DT = 0.01
N_BOOTSTRAP = 1000


def ode_on_grid(params: ModelParams, init: GroupFractions, sample_dt: float, steps: int) -> Trajectory:
    """RK4 solution sampled every ``sample_dt`` for ``steps`` samples, internal step <= 0.01."""
    substeps = max(1, int(math.ceil(sample_dt / ODE_MAX_DT - 1e-9)))
    fine = integrate_ode(ModelParams.for_ode(params.A, params.gamma), init, sample_dt * steps, sample_dt / substeps)
    values = fine.values[::substeps][:steps + 1]
    return Trajectory(sample_dt * np.arange(steps + 1), values)


def squared_distance(paths: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """(s - y)^2 + (beta - w)^2 per run, sample and group; ``paths`` is (M, T, 3, m)."""
    diff = paths[:, :, :2, :] - reference[None, :, :2, :]
    return (diff ** 2).sum(axis=2)


def convergence_metric(paths: np.ndarray, reference: np.ndarray, n_boot: int = N_BOOTSTRAP,
                       seed: int = 0) -> Tuple[float, float]:
    """Max over samples and groups of the run-averaged squared distance, with a bootstrap stderr."""
    dist = squared_distance(paths, reference)
    estimate = float(dist.mean(axis=0).max())
    M = len(dist)
    if M < 2 or n_boot < 2:
        return estimate, 0.0
    rng = np.random.default_rng(seed)
    boot = np.array([dist[rng.integers(0, M, M)].mean(axis=0).max() for _ in range(n_boot)])
    return estimate, float(boot.std(ddof=1))


def convergence_sweep(params: ModelParams, init: GroupFractions, n_list: Sequence[int],
                      lambda_rule: Callable[[int], float], M: int, t_end: float,
                      sample_dt: float = 0.5, base_seed: int = 0, mode: SimMode = SimMode.LAZY,
                      n_jobs: int = 1, n_boot: int = N_BOOTSTRAP, progress: bool = False) -> pd.DataFrame:
    """E_n for each population size, with lambda = lambda_rule(n).

    Target fractions are rounded to counts per n; the ODE starts from the
    rounded fractions so the initial mismatch is zero.
    """
    if params.B is None or params.rho is None:
        raise InputError("convergence_sweep needs B and rho")
    steps = int(math.ceil(t_end / sample_dt - 1e-9))
    rows = []
    for cell, n in enumerate(tqdm(list(n_list), desc="convergence sweep", disable=not progress)):
        lam = float(lambda_rule(n))
        sizes, infected, recovered = network_counts(init, n)
        cell_params = params.with_group_sizes(sizes).with_lambda(lam)
        seed = base_seed + cell * M
        runs = ensemble(cell_params, infected, M, steps * sample_dt, sample_dt, seed, mode=mode,
                        initial_recovered=recovered, n_jobs=n_jobs)
        reference = ode_on_grid(cell_params, initial_fractions(sizes, infected, recovered), sample_dt, steps)
        E_n, stderr = convergence_metric(runs.paths, reference.values, n_boot, seed)
        logger.info("n=%d lambda=%g: E_n=%.3g (stderr %.2g)", n, lam, E_n, stderr)
        rows.append({"n": n, "lambda": lam, "E_n": E_n, "stderr": stderr, "seed": seed})
    return pd.DataFrame(rows, columns=["n", "lambda", "E_n", "stderr", "seed"])


@dataclass(frozen=True)
class GapResult:
    table: pd.DataFrame
    gap: float
    stderr: float
    z: float
    seed: int


def _z_score(gap: float, stderr: float) -> float:
    if stderr > 0:
        return gap / stderr
    return 0.0 if gap == 0 else math.copysign(math.inf, gap)


def converse_gap(params: ModelParams, init: GroupFractions, n: int, M: int, t1: float, t2: float,
                 sample_dt: float = 0.5, base_seed: int = 0, group: Optional[int] = None,
                 mode: SimMode = SimMode.LAZY, n_jobs: int = 1, progress: bool = False) -> GapResult:
    """Monte-Carlo mean of s(t) minus the ODE's y(t) over [t1, t2].

    ``group`` selects one group's susceptible fraction; None uses the total.
    The sample step is shrunk so t2 falls on the grid.
    """
    if not 0 <= t1 <= t2:
        raise InputError("need 0 <= t1 <= t2")
    steps = int(math.ceil(t2 / sample_dt - 1e-9))
    dt = t2 / steps if steps else sample_dt
    sizes, infected, recovered = network_counts(init, n)
    net_params = params.with_group_sizes(sizes)
    reference = ode_on_grid(net_params, initial_fractions(sizes, infected, recovered), dt, steps)

    in_window = (reference.times >= t1 - 1e-9) & (reference.times <= t2 + 1e-9)
    groups = slice(None) if group is None else slice(group, group + 1)
    if np.any(reference.s[in_window][:, groups] <= 0) or np.any(reference.beta[in_window][:, groups] <= 0):
        raise InputError(f"window [{t1}, {t2}] violates positivity: the ODE has y or w at zero")

    runs = ensemble(net_params, infected, M, t2, dt, base_seed, mode=mode,
                    initial_recovered=recovered, n_jobs=n_jobs, progress=progress)
    sim_s = runs.paths[:, :, 0, groups].sum(axis=-1)
    ode_s = reference.s[:, groups].sum(axis=-1)

    gaps = sim_s.mean(axis=0) - ode_s
    stderrs = sim_s.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros_like(gaps)
    table = pd.DataFrame({
        "t": reference.times[in_window],
        "gap": gaps[in_window],
        "stderr": stderrs[in_window],
        "z": [_z_score(g, s) for g, s in zip(gaps[in_window], stderrs[in_window])],
    })
    last = table.iloc[-1]
    logger.info("converse gap at t=%g: %.3g (z=%.2f)", t2, last["gap"], last["z"])
    return GapResult(table, float(last["gap"]), float(last["stderr"]), float(last["z"]), base_seed)


@dataclass(frozen=True)
class EdgeAgeResult:
    ages: np.ndarray
    at_horizon: np.ndarray
    ks: float
    critical: float
    passed: bool
    atom_mass: float
    atom_expected: float
    atom_z: float
    seed: int


def edge_age_ks(ages: np.ndarray, at_horizon: np.ndarray, lambda_edge: float, t: float) -> float:
    """KS distance to F(tau) = 1 - exp(-lambda tau) on [0, t) with the remaining mass at t."""
    N = len(ages)
    inner = np.sort(ages[~at_horizon])
    cdf = -np.expm1(-lambda_edge * inner)
    ranks = np.arange(1, len(inner) + 1)
    d_plus = np.max(ranks / N - cdf, initial=0.0)
    d_minus = np.max(cdf - (ranks - 1) / N, initial=0.0)
    jump = abs(len(inner) / N + math.expm1(-lambda_edge * t))
    return float(max(d_plus, d_minus, jump))


def edge_age_distribution(params: ModelParams, pair: Optional[Tuple[int, int]], t: float, samples: int,
                          base_seed: int = 0, alpha: float = 0.01, progress: bool = False) -> EdgeAgeResult:
    """Time since each pair's last edge update at time ``t``, tested against its law.

    Each dense run contributes every ordered pair, or only ``pair`` when given;
    runs continue until ``samples`` ages are collected.
    """
    if t <= 0 or samples < 1:
        raise InputError("edge_age_distribution needs t > 0 and samples >= 1")
    n = params.n
    per_run = 1 if pair is not None else n * (n - 1)
    runs = int(math.ceil(samples / per_run))
    zero = np.zeros(params.m, dtype=np.int64)
    ages, atoms = [], []
    for k in tqdm(range(runs), desc="edge-age runs", disable=not progress):
        state = init_network(params, zero, base_seed + k, mode=SimMode.DENSE)
        _, events = simulate(state, params, t, t, stop_when_absorbed=False)
        last = np.full((n, n), np.nan)
        for event in events:
            if event.kind is EventKind.EDGE_UPDATE and event.time <= t:
                last[event.pair] = event.time
        if pair is not None:
            chosen = last[pair][None]
        else:
            chosen = last[~np.eye(n, dtype=bool)]
        atoms.append(np.isnan(chosen))
        ages.append(np.where(np.isnan(chosen), t, t - chosen))
    ages = np.concatenate(ages)[:samples]
    atoms = np.concatenate(atoms)[:samples]

    N = len(ages)
    ks = edge_age_ks(ages, atoms, params.lambda_edge, t)
    critical = float(stats.kstwobign.isf(alpha) / math.sqrt(N))
    expected = math.exp(-params.lambda_edge * t)
    mass = float(atoms.mean())
    sd = math.sqrt(expected * (1 - expected) / N)
    atom_z = _z_score(mass - expected, sd)
    logger.info("edge age: KS=%.4f (critical %.4f), atom %.4f vs %.4f", ks, critical, mass, expected)
    return EdgeAgeResult(ages, atoms, ks, critical, ks < critical, mass, expected, atom_z, base_seed)


def edge_density_check(params: ModelParams, t: float, samples: int, base_seed: int = 0,
                       infected: Optional[Sequence[int]] = None, progress: bool = False) -> pd.DataFrame:
    """Mean directed-edge count per group block at time ``t`` against N_ij * rho_ij / n."""
    if samples < 1:
        raise InputError("edge_density_check needs samples >= 1")
    sizes = params.group_sizes
    m, n = params.m, params.n
    initial = np.zeros(m, dtype=np.int64) if infected is None else np.asarray(infected)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    counts = np.zeros((samples, m, m))
    for k in tqdm(range(samples), desc="edge-density runs", disable=not progress):
        state = init_network(params, initial, base_seed + k, mode=SimMode.DENSE)
        if t > 0:
            simulate(state, params, t, t, record_events=False)
        for i in range(m):
            for j in range(m):
                counts[k, i, j] = state.edges[starts[i]:starts[i + 1], starts[j]:starts[j + 1]].sum()

    prob = params.edge_prob()
    rows = []
    for i in range(m):
        for j in range(m):
            pairs = sizes[i] * (sizes[j] - (i == j))
            expected = pairs * prob[i, j]
            band = 4 * math.sqrt(pairs * prob[i, j] * (1 - prob[i, j]) / samples)
            mean = float(counts[:, i, j].mean())
            rows.append({
                "i": i + 1, "j": j + 1, "pairs": int(pairs), "expected": expected, "mean": mean,
                "lower": expected - band, "upper": expected + band,
                "within": bool(abs(mean - expected) <= band), "seed": base_seed,
            })
    return pd.DataFrame(rows)
