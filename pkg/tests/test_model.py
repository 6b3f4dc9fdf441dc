import math

import numpy as np
import pytest

from flossim.model import (
    DpConfig,
    ModelParams,
    TrainConfig,
    aggregate,
    evaluate_accuracy,
    local_gradient,
    local_loss,
    predict,
    privatize,
    sgd_step,
)


def finite_difference_gradient(theta, xs, ys, step=1e-6):
    g = np.zeros_like(theta, dtype=float)
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += step
        down[i] -= step
        g[i] = (local_loss(up, xs, ys) - local_loss(down, xs, ys)) / (2 * step)
    return g


def random_problem(rng, n=10, dim=3):
    theta = rng.normal(size=dim + 1)
    xs = rng.normal(size=(n, dim))
    ys = (rng.random(n) < 0.5).astype(float)
    return theta, xs, ys


# -- predict ---------------------------------------------------------------------


def test_predict_zero_theta_is_half():
    assert predict(np.zeros(3), np.array([4.2, -1.0])) == 0.5


def test_predict_symmetry():
    theta = np.array([0.0, 0.7, -1.3])
    x = np.array([0.4, 2.0])
    assert predict(theta, x) + predict(theta, -x) == pytest.approx(1.0, abs=1e-12)


def test_predict_log3():
    # expit(ln 3) = 3/4
    assert predict(np.array([0.0, 1.0]), np.array([math.log(3.0)])) == pytest.approx(0.75, abs=1e-12)


def test_predict_dimension_mismatch():
    with pytest.raises(ValueError):
        predict(np.zeros(3), np.array([1.0, 2.0, 3.0]))


# -- loss ------------------------------------------------------------------------


def test_loss_zero_theta_is_ln2():
    rng = np.random.default_rng(0)
    _, xs, ys = random_problem(rng)
    assert local_loss(np.zeros(4), xs, ys) == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_vanishes_for_separated_data():
    xs = np.array([[1.0], [-1.0]])
    ys = np.array([1.0, 0.0])
    big = np.array([0.0, 40.0])
    assert local_loss(big, xs, ys) < 1e-12


def test_loss_single_sample_matches_prediction():
    theta = np.array([0.0, 1.0])
    xs = np.array([[math.log(3.0)]])
    ys = np.array([1.0])
    assert local_loss(theta, xs, ys) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_loss_rejects_empty_dataset():
    with pytest.raises(ValueError):
        local_loss(np.zeros(2), np.empty((0, 1)), np.empty(0))


def test_loss_is_convex_on_random_segments():
    rng = np.random.default_rng(7)
    for _ in range(20):
        theta_a, xs, ys = random_problem(rng)
        theta_b = rng.normal(size=theta_a.size)
        mid = 0.5 * (theta_a + theta_b)
        assert local_loss(mid, xs, ys) <= (
            0.5 * local_loss(theta_a, xs, ys) + 0.5 * local_loss(theta_b, xs, ys) + 1e-12
        )


# -- gradient ----------------------------------------------------------------------


def test_gradient_matches_finite_differences_at_20_points():
    rng = np.random.default_rng(123)
    for _ in range(20):
        theta, xs, ys = random_problem(rng)
        exact = local_gradient(theta, xs, ys)
        approx = finite_difference_gradient(theta, xs, ys)
        rel = np.linalg.norm(exact - approx) / max(np.linalg.norm(approx), 1e-12)
        assert rel <= 1e-5


def test_gradient_near_zero_at_mle():
    # Fit by plain gradient descent until stationary, then check optimality.
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(40, 2))
    truth = np.array([0.3, 1.0, -0.5])
    ys = (rng.random(40) < 1.0 / (1.0 + np.exp(-(truth[0] + xs @ truth[1:])))).astype(float)
    theta = np.zeros(3)
    for _ in range(8000):
        theta = theta - 0.5 * local_gradient(theta, xs, ys)
    assert np.linalg.norm(local_gradient(theta, xs, ys)) < 1e-8


def test_gradient_balanced_pair_cancels_feature_block():
    xs = np.array([[1.5, -2.0], [1.5, -2.0]])
    ys = np.array([1.0, 0.0])
    g = local_gradient(np.zeros(3), xs, ys)
    assert np.allclose(g, 0.0)


def test_full_gradient_step_decreases_loss():
    rng = np.random.default_rng(21)
    for _ in range(10):
        theta, xs, ys = random_problem(rng, n=30)
        base = local_loss(theta, xs, ys)
        g = local_gradient(theta, xs, ys)
        eta = 1.0
        for _ in range(60):
            if local_loss(sgd_step(theta, g, eta), xs, ys) < base:
                break
            eta *= 0.5
        assert local_loss(sgd_step(theta, g, eta), xs, ys) < base


# -- privatize ----------------------------------------------------------------------


def test_privatize_disabled_is_identity():
    g = np.array([3.0, -4.0])
    out = privatize(g, DpConfig(), np.random.default_rng(0))
    assert np.array_equal(out, g)


def test_privatize_clips_to_norm():
    g = np.array([6.0, 8.0])  # norm 10
    out = privatize(g, DpConfig(clip_norm=1.0), np.random.default_rng(0))
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    small = np.array([0.3, 0.4])
    out = privatize(small, DpConfig(clip_norm=1.0), np.random.default_rng(0))
    assert np.array_equal(out, small)


def test_privatize_noise_variance():
    rng = np.random.default_rng(99)
    dp = DpConfig(clip_norm=2.0, noise_sigma=0.5)
    draws = np.array([privatize(np.zeros(2), dp, rng) for _ in range(10000)])
    target = (dp.noise_sigma * dp.clip_norm) ** 2
    for coord in range(2):
        assert abs(draws[:, coord].var() - target) / target < 0.05


def test_privatize_rejects_sigma_without_clip():
    with pytest.raises(ValueError):
        DpConfig(noise_sigma=0.5)


# -- aggregate / sgd -------------------------------------------------------------------


def test_aggregate_single_and_cancelling():
    g = np.array([1.0, 2.0])
    assert np.array_equal(aggregate([g]), g)
    assert np.array_equal(aggregate([g, -g]), np.zeros(2))


def test_aggregate_hand_mean():
    grads = [np.array([1.0, 0.0]), np.array([0.0, 3.0]), np.array([2.0, 3.0])]
    assert np.allclose(aggregate(grads), np.array([1.0, 2.0]))


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_sgd_fixed_point_and_substitution():
    theta = np.array([1.0, -2.0])
    assert np.array_equal(sgd_step(theta, np.zeros(2), 0.3), theta)
    v = np.array([0.5, 1.5])
    assert np.array_equal(sgd_step(np.zeros(2), v, 1.0), -v)


def test_sgd_two_steps_differ_from_summed_gradient_step():
    # Quadratic surrogate 0.5 * theta' A theta, A = diag(1, 2), eta = 0.1.
    A = np.diag([1.0, 2.0])
    theta0 = np.array([1.0, 1.0])
    eta = 0.1
    theta1 = sgd_step(theta0, A @ theta0, eta)
    theta2 = sgd_step(theta1, A @ theta1, eta)
    assert np.allclose(theta2, [0.81, 0.64])
    summed = sgd_step(theta0, A @ theta0 + A @ theta0, eta)
    assert np.allclose(summed, [0.8, 0.6])
    assert not np.allclose(theta2, summed)


def test_sgd_rejects_nonfinite():
    with pytest.raises(ValueError):
        sgd_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1)


# -- accuracy -------------------------------------------------------------------------


def test_accuracy_better_than_chance_under_truth():
    rng = np.random.default_rng(3)
    truth = np.array([0.2, 2.0, -1.5])
    xs = rng.normal(size=(4000, 2))
    p = 1.0 / (1.0 + np.exp(-(truth[0] + xs @ truth[1:])))
    ys = (rng.random(4000) < p).astype(float)
    assert evaluate_accuracy(truth, xs, ys) > 0.5


def test_accuracy_degenerate_all_positive():
    xs = np.array([[1.0], [2.0]])
    ys = np.array([1.0, 1.0])
    assert evaluate_accuracy(np.array([5.0, 1.0]), xs, ys) == 1.0


def test_accuracy_zero_theta_counts_tie_break_class():
    rng = np.random.default_rng(11)
    n = 10000
    xs = rng.normal(size=(n, 2))
    ys = (rng.random(n) < 0.5).astype(float)
    # p = 0.5 everywhere, tie-break predicts class 1.
    acc = evaluate_accuracy(np.zeros(3), xs, ys)
    rate = ys.mean()
    se = math.sqrt(rate * (1 - rate) / n)
    assert abs(acc - rate) <= 3 * se + 1e-12


# -- config types ------------------------------------------------------------------------


def test_model_params_validation():
    p = ModelParams(np.array([0.0, 1.0, 2.0]))
    assert p.dim == 3
    with pytest.raises(ValueError):
        ModelParams(np.array([np.inf, 0.0]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0.0, k=5, max_iterations=3, straggler_cutoff=1.0, rounds=2)
    with pytest.raises(ValueError):
        TrainConfig(eta=0.1, k=0, max_iterations=3, straggler_cutoff=1.0, rounds=2)
    with pytest.raises(ValueError):
        TrainConfig(eta=0.1, k=5, max_iterations=3, straggler_cutoff=0.0, rounds=2)
