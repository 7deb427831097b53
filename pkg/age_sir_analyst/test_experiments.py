import math

import numpy as np
import pytest

from age_sir_analyst.errors import InputError
from age_sir_analyst.experiments import (
    convergence_metric,
    convergence_sweep,
    converse_gap,
    edge_age_distribution,
    edge_age_ks,
    edge_density_check,
    ode_on_grid,
)
from age_sir_analyst.model_core import GroupFractions, ModelParams, validate_params


def network(B, rho, gamma, sizes, lambda_edge=1.0) -> ModelParams:
    return validate_params({"B": B, "rho": rho, "gamma": gamma, "group_sizes": sizes, "lambda_edge": lambda_edge})


@pytest.fixture
def base_params() -> ModelParams:
    return network([[2.0, 1.0], [1.0, 2.0]], [[1.0, 0.5], [0.5, 1.0]], [0.5, 0.5], [50, 50])


def test_ode_on_grid_samples_fine_solution():
    params = ModelParams.for_ode([[2.0]], [1.0])
    init = GroupFractions.build([0.9], [0.1])
    grid = ode_on_grid(params, init, 0.5, 6)
    np.testing.assert_allclose(grid.times, 0.5 * np.arange(7))
    assert len(grid) == 7
    first_integral = grid.beta[:, 0] + grid.s[:, 0] - 0.5 * np.log(grid.s[:, 0])
    np.testing.assert_allclose(first_integral, first_integral[0], atol=1e-9)


def test_metric_of_the_reference_itself_is_zero():
    params = ModelParams.for_ode([[0.8, 0.2], [0.3, 0.6]], [0.2, 0.3])
    reference = ode_on_grid(params, GroupFractions.build([0.49, 0.49], [0.01, 0.01]), 0.5, 20).values
    E, stderr = convergence_metric(np.stack([reference] * 5), reference, n_boot=50)
    assert (E, stderr) == (0.0, 0.0)

    shifted = np.stack([reference] * 5)
    shifted[:, :, 0, 1] += 0.1
    E, _ = convergence_metric(shifted, reference, n_boot=50)
    assert E == pytest.approx(0.01)


def test_no_infection_means_no_distance(base_params):
    table = convergence_sweep(base_params, GroupFractions.build([0.5, 0.5], [0.0, 0.0]), [40, 80],
                              lambda n: 2.0 * n, M=3, t_end=2.0, base_seed=17, n_boot=20)
    assert list(table.columns) == ["n", "lambda", "E_n", "stderr", "seed"]
    assert table["E_n"].tolist() == [0.0, 0.0]
    assert table["seed"].tolist() == [17, 20]
    assert table["lambda"].tolist() == [80.0, 160.0]


def test_convergence_sweep_needs_network(base_params):
    with pytest.raises(InputError, match="B and rho"):
        convergence_sweep(ModelParams.for_ode([[1.0]], [0.5]), GroupFractions.build([0.9], [0.1]), [10],
                          lambda n: 1.0, M=2, t_end=1.0)


def test_converse_gap_checks_its_window(base_params):
    no_infection = GroupFractions.build([0.5, 0.5], [0.0, 0.0])
    with pytest.raises(InputError, match="positivity"):
        converse_gap(base_params, no_infection, n=100, M=2, t1=0.0, t2=1.0)
    with pytest.raises(InputError, match="t1 <= t2"):
        converse_gap(base_params, GroupFractions.build([0.49, 0.49], [0.01, 0.01]), n=100, M=2, t1=2.0, t2=1.0)


def test_converse_gap_table(base_params):
    init = GroupFractions.build([0.45, 0.45], [0.05, 0.05])
    result = converse_gap(base_params, init, n=100, M=4, t1=1.0, t2=2.0, sample_dt=0.3, base_seed=8, group=0)
    assert list(result.table.columns) == ["t", "gap", "stderr", "z"]
    # 2.0 / 0.3 rounds up to 7 samples, so the step shrinks to 2/7
    np.testing.assert_allclose(result.table["t"], np.arange(4, 8) * 2.0 / 7)
    assert result.gap == result.table["gap"].iloc[-1]
    assert result.seed == 8


def test_edge_age_matches_exponential_law():
    params = network([[1.0]], [[2.0]], [0.5], [10], lambda_edge=1.0)
    result = edge_age_distribution(params, None, t=2.0, samples=10_000, base_seed=3)
    assert len(result.ages) == 10_000
    assert result.ks < result.critical and result.passed
    assert result.atom_expected == pytest.approx(math.exp(-2.0))
    assert abs(result.atom_z) < 4
    assert np.all(result.ages[result.at_horizon] == 2.0)
    assert np.all((result.ages >= 0) & (result.ages <= 2.0))


@pytest.mark.parametrize("lambda_edge, t", [(1.0, 0.05), (10.0, 2.0)])
def test_edge_age_at_extremes(lambda_edge, t):
    params = network([[1.0]], [[2.0]], [0.5], [8], lambda_edge=lambda_edge)
    result = edge_age_distribution(params, None, t=t, samples=3000, base_seed=1)
    assert result.passed
    assert abs(result.atom_z) < 4


def test_edge_age_single_pair():
    params = network([[1.0]], [[2.0]], [0.5], [4], lambda_edge=1.0)
    result = edge_age_distribution(params, (0, 1), t=1.0, samples=500, base_seed=0)
    assert len(result.ages) == 500
    assert result.seed == 0
    with pytest.raises(InputError):
        edge_age_distribution(params, None, t=0.0, samples=10)


def test_edge_age_ks_statistic():
    # all mass at the horizon exactly as expected: only the inner part can differ
    ages = np.array([2.0, 2.0])
    assert edge_age_ks(ages, np.array([True, True]), 1.0, 2.0) == pytest.approx(1 - math.exp(-2.0))


@pytest.mark.parametrize("rho, within_expected", [(0.0, 0.0), (20.0, 380.0)])
def test_edge_density_degenerate_probabilities(rho, within_expected):
    params = network([[1.0]], [[rho]], [0.5], [20])
    table = edge_density_check(params, t=1.0, samples=3, base_seed=0)
    row = table.iloc[0]
    assert row["pairs"] == 380
    assert row["mean"] == within_expected == row["expected"]
    assert bool(row["within"])


@pytest.mark.parametrize("t", [0.0, 10.0])
def test_edge_density_matches_stationary_law(t):
    params = network([[1.0]], [[5.0]], [0.5], [100])
    table = edge_density_check(params, t=t, samples=20, base_seed=12)
    row = table.iloc[0]
    assert row["expected"] == pytest.approx(495.0)
    assert bool(row["within"])


def test_edge_density_blocks(base_params):
    table = edge_density_check(base_params, t=0.5, samples=10, base_seed=2)
    assert table[["i", "j"]].values.tolist() == [[1, 1], [1, 2], [2, 1], [2, 2]]
    assert table["pairs"].tolist() == [2450, 2500, 2500, 2450]
    with pytest.raises(InputError):
        edge_density_check(base_params, t=0.5, samples=0)


@pytest.mark.slow
def test_distance_to_ode_shrinks_with_population():
    params = network([[2.0, 1.0], [1.0, 2.0]], [[1.0, 0.5], [0.5, 1.0]], [0.5, 0.6], [1, 1])
    init = GroupFractions.build([0.48, 0.47], [0.02, 0.03])
    table = convergence_sweep(params, init, [100, 400, 1600], lambda n: 10 * math.sqrt(n), M=50,
                              t_end=10.0, base_seed=0)
    E = table["E_n"].to_numpy()
    assert np.all(np.diff(E) < 0)
    assert E[2] <= E[0] / 3


@pytest.mark.slow
def test_slow_edge_updates_leave_susceptibles_behind():
    params = network([[5.0]], [[0.4]], [1.0], [1000], lambda_edge=1.0)
    init = GroupFractions.build([0.95], [0.05])
    gap = converse_gap(params, init, n=1000, M=200, t1=0.5, t2=2.0, base_seed=0)
    assert gap.gap > 0 and gap.z > 3

    control = converse_gap(params.with_lambda(500.0), init, n=1000, M=200, t1=0.5, t2=2.0, base_seed=0)
    assert abs(control.z) < 4
