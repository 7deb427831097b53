"""Shared fixtures: noiseless synthetic trajectories from the one-day map."""

from typing import Sequence

import numpy as np
import pytest

from age_sir_analyst.model_core import GroupFractions, ModelParams, Trajectory, discrete_step
from age_sir_analyst.settings import get_settings

A_PRE = np.array([[0.25, 0.10], [0.08, 0.20]])
GAMMA_PRE = np.array([0.10, 0.12])


def piecewise_trajectory(init: GroupFractions, days: int, A_list: Sequence[np.ndarray],
                         gamma: np.ndarray, change_days: Sequence[int] = ()) -> Trajectory:
    """Iterate the one-day map, switching to A_list[j] from day change_days[j-1] on."""
    states = [init]
    for k in range(days):
        phase = sum(k >= c for c in change_days)
        states.append(discrete_step(ModelParams.for_ode(A_list[phase], gamma), states[-1]))
    return Trajectory(np.arange(days + 1, dtype=float), np.stack([s.as_array() for s in states]))


@pytest.fixture
def two_group_init() -> GroupFractions:
    return GroupFractions.build([0.599, 0.3995], [0.001, 0.0005])


@pytest.fixture
def constant_series(two_group_init) -> Trajectory:
    return piecewise_trajectory(two_group_init, 120, [A_PRE], GAMMA_PRE)


@pytest.fixture
def doubled_at_60(two_group_init) -> Trajectory:
    return piecewise_trajectory(two_group_init, 120, [A_PRE, 2 * A_PRE], GAMMA_PRE, [60])


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Point AGE_SIR_WORKSPACE at a temporary directory for the agent tools."""
    monkeypatch.setenv("AGE_SIR_WORKSPACE", str(tmp_path))
    get_settings.cache_clear()
    yield tmp_path
    get_settings.cache_clear()
