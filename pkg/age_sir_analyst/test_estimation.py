import warnings
from itertools import combinations

import numpy as np
import pytest

from age_sir_analyst.conftest import piecewise_trajectory
from age_sir_analyst.errors import InputError
from age_sir_analyst.estimation import (
    build_regression,
    daily_new_cases,
    estimate_per_phase,
    fitted_trajectory,
    group_rankings,
    kkt_residual,
    mean_square_error,
    mse,
    nnls,
    nnls_regularized,
)
from age_sir_analyst.model_core import GroupFractions, ModelParams, iterate_discrete, pack_x

A_TRUE = np.array([[0.3, 0.1], [0.2, 0.4]])
GAMMA_TRUE = np.array([0.1, 0.15])
X_TRUE = pack_x(A_TRUE, GAMMA_TRUE)


@pytest.fixture
def noiseless():
    init = GroupFractions.build([0.598, 0.3998], [0.002, 0.0002])
    return iterate_discrete(ModelParams.for_ode(A_TRUE, GAMMA_TRUE), init, 60)


def brute_force_nnls(C, d):
    """Best least-squares solution over every support with a nonnegative fit."""
    best, best_x = np.inf, np.zeros(C.shape[1])
    for size in range(C.shape[1] + 1):
        for support in combinations(range(C.shape[1]), size):
            x = np.zeros(C.shape[1])
            if support:
                x[list(support)] = np.linalg.lstsq(C[:, support], d, rcond=None)[0]
            if np.all(x >= 0) and np.linalg.norm(C @ x - d) < best:
                best, best_x = np.linalg.norm(C @ x - d), x
    return best_x


def test_regression_rows_for_one_group():
    traj = iterate_discrete(ModelParams.for_ode([[2.0]], [1.0]), GroupFractions.build([0.9], [0.1]), 1)
    system = build_regression(traj, (0, 1))
    np.testing.assert_allclose(system.C, [[-0.09, 0.0], [0.09, -0.1], [0.0, 0.1]], atol=1e-15)
    np.testing.assert_allclose(system.d, [-0.18, 0.08, 0.10], atol=1e-15)
    assert system.C.shape == (3, 2) and not system.degenerate


def test_regression_is_exact_on_noiseless_data(noiseless):
    system = build_regression(noiseless, (10, 40))
    assert system.C.shape == (3 * 2 * 30, 6)
    np.testing.assert_allclose(system.C @ X_TRUE, system.d, atol=1e-12)


def test_regression_without_infections_is_degenerate():
    traj = iterate_discrete(ModelParams.for_ode([[1.0]], [0.3]), GroupFractions.build([1.0], [0.0]), 5)
    system = build_regression(traj, (0, 5))
    assert system.degenerate
    report = nnls(system.C, system.d)
    assert report.degenerate
    np.testing.assert_array_equal(report.x, 0.0)


def test_regression_window_errors(noiseless):
    with pytest.raises(InputError, match="empty"):
        build_regression(noiseless, (5, 5))
    with pytest.raises(InputError, match="outside"):
        build_regression(noiseless, (50, 70))


def test_nnls_simple_cases():
    report = nnls(np.eye(3), [1.0, -2.0, 3.0])
    np.testing.assert_allclose(report.x, [1.0, 0.0, 3.0])
    assert report.residual_norm == pytest.approx(2.0)

    zero = nnls(np.ones((4, 2)), np.zeros(4))
    np.testing.assert_array_equal(zero.x, 0.0)
    assert not zero.degenerate and zero.iterations == 0

    with pytest.raises(InputError, match="rows"):
        nnls(np.eye(3), [1.0, 2.0])


def test_nnls_matches_brute_force_on_random_systems():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        C = rng.standard_normal((6, 4))
        d = rng.standard_normal(6)
        report = nnls(C, d)
        expected = brute_force_nnls(C, d)
        np.testing.assert_allclose(report.x, expected, atol=1e-8)
        assert np.all(report.x >= 0)
        assert report.kkt_residual <= 1e-8
        assert kkt_residual(C, d, report.x) == pytest.approx(report.kkt_residual)


def test_nnls_is_scale_equivariant():
    rng = np.random.default_rng(7)
    C = rng.standard_normal((12, 5))
    d = rng.standard_normal(12)
    base = nnls(C, d).x
    np.testing.assert_allclose(nnls(C, 1e-6 * d).x, 1e-6 * base, rtol=1e-8, atol=1e-14)
    columns = np.array([1e-4, 1.0, 10.0, 1e3, 0.5])
    np.testing.assert_allclose(nnls(C * columns, d).x, base / columns, rtol=1e-8, atol=1e-12)


def test_regularized_special_cases():
    rng = np.random.default_rng(3)
    C = rng.standard_normal((8, 3))
    d = rng.standard_normal(8)
    x_prev = np.array([0.5, 1.0, 2.0])

    np.testing.assert_allclose(nnls_regularized(C, d, x_prev, 0.0).x, nnls(C, d).x)
    np.testing.assert_allclose(nnls_regularized(np.zeros((8, 3)), d, x_prev, 1e-3).x, x_prev, rtol=1e-10)
    np.testing.assert_allclose(nnls_regularized(C, d, x_prev, 1e9).x, x_prev, rtol=1e-6)

    lam = 0.2
    stacked = nnls(np.vstack([C, np.sqrt(lam) * np.eye(3)]), np.concatenate([d, np.sqrt(lam) * x_prev]))
    report = nnls_regularized(C, d, x_prev, lam)
    np.testing.assert_allclose(report.x, stacked.x)
    assert report.residual_norm == pytest.approx(np.linalg.norm(C @ report.x - d))


def test_regularized_rejects_bad_prior():
    with pytest.raises(InputError, match="lambda_reg"):
        nnls_regularized(np.eye(2), [1.0, 1.0], [0.0, 0.0], -1.0)
    with pytest.raises(InputError, match="x_prev"):
        nnls_regularized(np.eye(2), [1.0, 1.0], [-1.0, 0.0], 1.0)
    with pytest.raises(InputError, match="x_prev"):
        nnls_regularized(np.eye(2), [1.0, 1.0], [1.0], 1.0)


def test_mse_of_true_parameters_is_zero(noiseless):
    window = noiseless.window(20, 50)
    assert mse(window, X_TRUE) == pytest.approx(0.0, abs=1e-30)
    assert mse(window, 2 * X_TRUE) > 0
    assert mse(window, 1e6 * X_TRUE) == np.inf
    with pytest.raises(InputError, match="shape"):
        mean_square_error(np.zeros((3, 3, 1)), np.zeros((2, 3, 1)))


def test_mse_of_diverging_run_is_silent(noiseless):
    window = noiseless.window(0, 60)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert mse(window, 1e150 * X_TRUE) == np.inf


def test_single_phase_recovers_parameters(noiseless):
    (estimate,) = estimate_per_phase(noiseless)
    assert (estimate.phase_index, estimate.start_day, estimate.end_day) == (1, 0, 60)
    np.testing.assert_allclose(estimate.report.x, X_TRUE, rtol=1e-6, atol=1e-9)
    payload = estimate.to_dict()
    np.testing.assert_allclose(payload["A"], A_TRUE, rtol=1e-6)
    assert payload["degenerate"] is False


def test_identical_phases_agree(noiseless):
    first, second = estimate_per_phase(noiseless, [30])
    assert (first.start_day, first.end_day, second.start_day, second.end_day) == (0, 30, 30, 60)
    np.testing.assert_allclose(first.report.x, X_TRUE, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(second.report.x, X_TRUE, rtol=1e-6, atol=1e-9)


def test_phase_changes_are_recovered(two_group_init):
    traj = piecewise_trajectory(two_group_init, 80, [A_TRUE, 0.5 * A_TRUE], GAMMA_TRUE, [40])
    first, second = estimate_per_phase(traj, [40], lambda_reg=0.0)
    np.testing.assert_allclose(first.report.params()[0], A_TRUE, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(second.report.params()[0], 0.5 * A_TRUE, rtol=1e-6, atol=1e-9)


def test_bad_phases_are_rejected(noiseless):
    with pytest.raises(InputError, match="shorter than 2 days"):
        estimate_per_phase(noiseless, [59])
    with pytest.raises(InputError, match="strictly increasing"):
        estimate_per_phase(noiseless, [0])
    with pytest.raises(InputError, match="strictly increasing"):
        estimate_per_phase(noiseless, [40, 20])


def test_fitted_trajectory_reproduces_noiseless_data(noiseless):
    estimates = estimate_per_phase(noiseless, [25])
    fitted, error = fitted_trajectory(noiseless, estimates)
    np.testing.assert_array_equal(fitted.times, noiseless.times)
    assert error < 1e-16
    with pytest.raises(InputError):
        fitted_trajectory(noiseless, [])


def test_group_rankings():
    ranking = group_rankings([[0.0, 1.0], [5.0, 0.0]])
    np.testing.assert_array_equal(ranking.susceptibility, [1.0, 5.0])
    assert ranking.most_susceptible == [1, 0]
    assert ranking.most_infectious == [0, 1]
    with pytest.raises(InputError):
        group_rankings([1.0, 2.0])


def test_daily_new_cases(noiseless):
    cases = daily_new_cases(noiseless, [600_000, 400_000])
    assert cases.shape == (60, 2)
    assert np.all(cases >= 0)
    np.testing.assert_allclose(cases[0], -(noiseless.s[1] - noiseless.s[0]) * 1_000_000)
