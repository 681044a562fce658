"""End-to-end inference: fits, predictions, evidence, sparse bound, optimizer."""

import math

import numpy as np
import pytest

from minigp import (
    RBF,
    DimensionMismatchError,
    Linear,
    Matern32,
    OptimizerConfig,
    Periodic,
    Scale,
    Sum,
    cholesky,
    default_ski_grid,
    farthest_point_sampling,
    flatten_model_params,
    flatten_params,
    gp_fit,
    gp_predict,
    kernel_eval,
    log_marginal_likelihood,
    metrics,
    optimize_hyperparams,
    sample_gp_targets,
    sparse_fit,
    sparse_predict,
    unflatten_model_params,
    vfe_objective,
)

LOG_2PI = math.log(2.0 * math.pi)


def make_problem(n, d, seed, kernel=None, noise=0.1, spread=1.0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d)) * spread
    k = kernel if kernel is not None else Scale(1.2, RBF(0.4))
    y = sample_gp_targets(x, k, noise, rng)[:, 0]
    return x, np.ascontiguousarray(y), k


# ----------------------------------------------------------------- gp_fit


def test_fit_scalar_alpha():
    state = gp_fit(np.array([[0.0]]), np.array([2.0]), RBF(1.0), 1.0, "cholesky")
    np.testing.assert_allclose(state.alpha, [1.0], atol=1e-14)  # (1+1) a = 2


def test_fit_cg_alpha_matches_cholesky():
    x, y, k = make_problem(500, 2, seed=0)
    a = gp_fit(x, y, k, 0.1, "cholesky").alpha
    b = gp_fit(x, y, k, 0.1, "cg").alpha
    assert np.max(np.abs(a - b)) <= 1e-6


def test_auto_strategy_thresholds():
    x, y, k = make_problem(200, 2, seed=1)
    assert gp_fit(x, y, k, 0.1, "auto").strategy == "cholesky"

    rng = np.random.default_rng(2)
    x1 = rng.random((10_000, 1))
    y1 = np.sin(4.0 * x1[:, 0]) + 0.1 * rng.standard_normal(10_000)
    assert gp_fit(x1, y1, RBF(0.3), 0.1, "auto").strategy == "ski"

    x2 = rng.random((4100, 2))
    y2 = rng.standard_normal(4100)
    assert gp_fit(x2, y2, RBF(0.5), 1.0, "auto").strategy == "cg"
    # non-stationary kernels cannot ride the grid path
    y3 = rng.standard_normal(4100)
    assert gp_fit(x2[:, :1], y3, Linear(1.0), 1.0, "auto").strategy == "cg"


def test_fit_validation():
    x, y, k = make_problem(10, 2, seed=3)
    with pytest.raises(ValueError):
        gp_fit(x, y, k, 0.0, "cholesky")
    with pytest.raises(ValueError):
        gp_fit(x, y, k, 0.1, "newton")
    with pytest.raises(DimensionMismatchError):
        gp_fit(x, y[:5], k, 0.1, "cholesky")
    with pytest.raises(DimensionMismatchError):
        gp_fit(x, y, k, 0.1, "ski")  # D=2


def test_fit_state_is_immutable():
    x, y, k = make_problem(20, 1, seed=4)
    state = gp_fit(x, y, k, 0.1, "cholesky")
    with pytest.raises(Exception):
        state.noise = 0.5


def test_fit_alpha_residual_invariant():
    # || (K + noise I) alpha - y || small under the active operator
    for strategy in ("cholesky", "cg"):
        x, y, k = make_problem(300, 2, seed=5)
        state = gp_fit(x, y, k, 0.1, strategy)
        gram = kernel_eval(k, x, x)
        gram.flat[:: 300 + 1] += 0.1
        resid = np.linalg.norm(gram @ state.alpha - y)
        assert resid <= 1e-5 * np.linalg.norm(y), strategy


# -------------------------------------------------------------- gp_predict


def test_predict_two_point_hand_solve():
    a = math.exp(-0.5)
    eps = 1e-8
    y = np.array([0.7, -0.4])
    state = gp_fit(np.array([[0.0], [1.0]]), y, RBF(1.0), eps, "cholesky")
    mean, var = gp_predict(state, np.array([[0.0]]))
    # closed-form 2x2 inverse
    det = (1 + eps) ** 2 - a * a
    inv = np.array([[1 + eps, -a], [-a, 1 + eps]]) / det
    kstar = np.array([1.0, a])
    want_mean = kstar @ inv @ y
    want_var = 1.0 - kstar @ inv @ kstar
    assert abs(mean[0] - want_mean) <= 1e-9
    assert abs(var[0] - max(want_var, 0.0)) <= 1e-9
    # near-interpolation at tiny noise
    assert abs(mean[0] - y[0]) <= 1e-3
    assert var[0] <= 1e-3


def test_predict_far_point_reverts_to_prior():
    x, y, k = make_problem(80, 2, seed=6)
    state = gp_fit(x, y, k, 0.1, "cholesky")
    far = np.full((1, 2), 150.0)
    mean, var = gp_predict(state, far)
    assert abs(mean[0]) <= 1e-6
    assert abs(var[0] - 1.2) <= 1e-6  # prior amplitude of the Scale node


def test_predict_empty_test_set():
    x, y, k = make_problem(15, 2, seed=7)
    mean, var = gp_predict(gp_fit(x, y, k, 0.1, "cholesky"), np.empty((0, 2)))
    assert mean.shape == (0,) and var.shape == (0,)


def test_predict_dimension_mismatch():
    x, y, k = make_problem(15, 2, seed=8)
    with pytest.raises(DimensionMismatchError):
        gp_predict(gp_fit(x, y, k, 0.1, "cholesky"), np.ones((3, 4)))


def test_predict_variance_nonnegative_and_latent():
    x, y, k = make_problem(150, 1, seed=9, noise=0.3)
    state = gp_fit(x, y, k, 0.3, "cholesky")
    mean, var = gp_predict(state, x)
    assert np.all(var >= 0.0)
    # latent: on training points with noticeable noise, well below prior + noise
    prior = 1.2
    assert np.all(var <= prior + 1e-8)


def test_predict_permutation_equivariance():
    x, y, k = make_problem(120, 2, seed=10)
    xs = np.random.default_rng(11).random((20, 2))
    mean_a, var_a = gp_predict(gp_fit(x, y, k, 0.1, "cholesky"), xs)
    perm = np.random.default_rng(12).permutation(120)
    mean_b, var_b = gp_predict(gp_fit(x[perm], y[perm], k, 0.1, "cholesky"), xs)
    assert np.max(np.abs(mean_a - mean_b)) <= 1e-10
    assert np.max(np.abs(var_a - var_b)) <= 1e-10


def test_scale_consistency_identity():
    # scaling y by c with kernel and noise scaled by c^2 scales the posterior
    # mean by c and the latent variance by c^2 (the variance picks up the
    # covariance units; only the standardized predictive law is unchanged)
    c = 3.5
    x, y, k = make_problem(90, 2, seed=13, kernel=Scale(1.0, RBF(0.4)))
    xs = np.random.default_rng(14).random((12, 2))
    base = gp_fit(x, y, k, 0.1, "cholesky")
    mean_a, var_a = gp_predict(base, xs)
    scaled = gp_fit(x, c * y, Scale(c * c, RBF(0.4)), c * c * 0.1, "cholesky")
    mean_b, var_b = gp_predict(scaled, xs)
    np.testing.assert_allclose(mean_b, c * mean_a, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(var_b, c * c * var_a, rtol=1e-10, atol=1e-12)


def test_cross_strategy_agreement_medium_n():
    x, y, k = make_problem(600, 2, seed=15)
    xs = np.random.default_rng(16).random((40, 2))
    mean_c, var_c = gp_predict(gp_fit(x, y, k, 0.1, "cholesky"), xs)
    mean_g, var_g = gp_predict(gp_fit(x, y, k, 0.1, "cg"), xs)
    assert np.max(np.abs(mean_c - mean_g)) <= 1e-5
    assert np.max(np.abs(var_c - var_g)) <= 3e-3


def test_ski_strategy_agrees_with_cholesky_1d():
    rng = np.random.default_rng(17)
    n = 1200
    x = np.sort(rng.random(n))[:, None].copy()
    y = np.sin(5.0 * x[:, 0]) + 0.2 * rng.standard_normal(n)
    k = RBF(0.15)
    xs = rng.random((30, 1))
    mean_c, _ = gp_predict(gp_fit(x, y, k, 0.2, "cholesky"), xs)
    grid = default_ski_grid(n)
    assert grid >= 4 * math.sqrt(n)
    mean_s, _ = gp_predict(gp_fit(x, y, k, 0.2, "ski", grid_size=grid), xs)
    assert np.max(np.abs(mean_c - mean_s)) <= 1e-3


# ------------------------------------------------- log_marginal_likelihood


def test_lml_scalar_case():
    state = gp_fit(np.array([[0.0]]), np.array([0.0]), RBF(1.0), 1.0, "cholesky")
    want = -0.5 * math.log(2.0) - 0.5 * LOG_2PI
    assert abs(log_marginal_likelihood(state) - want) <= 1e-12


def test_lml_matches_dense_formula():
    x, y, k = make_problem(150, 2, seed=18)
    state = gp_fit(x, y, k, 0.1, "cholesky")
    gram = kernel_eval(k, x, x)
    gram.flat[:: 150 + 1] += 0.1
    sign, logdet = np.linalg.slogdet(gram)
    want = -0.5 * (y @ np.linalg.solve(gram, y) + logdet + 150 * LOG_2PI)
    assert abs(log_marginal_likelihood(state) - want) <= 1e-8


def test_lml_cg_within_one_percent():
    x, y, k = make_problem(300, 2, seed=19, noise=0.25)
    exact = log_marginal_likelihood(gp_fit(x, y, k, 0.25, "cholesky"))
    approx = log_marginal_likelihood(gp_fit(x, y, k, 0.25, "cg"), seed=0)
    assert abs(approx - exact) / abs(exact) <= 0.01


def test_lml_permutation_invariant():
    x, y, k = make_problem(100, 2, seed=20)
    a = log_marginal_likelihood(gp_fit(x, y, k, 0.1, "cholesky"))
    perm = np.random.default_rng(21).permutation(100)
    b = log_marginal_likelihood(gp_fit(x[perm], y[perm], k, 0.1, "cholesky"))
    assert abs(a - b) <= 1e-10


def test_lml_ski_strategy_runs():
    rng = np.random.default_rng(22)
    x = np.sort(rng.random(800))[:, None].copy()
    y = np.sin(3.0 * x[:, 0]) + 0.3 * rng.standard_normal(800)
    state = gp_fit(x, y, RBF(0.2), 0.3, "ski")
    value = log_marginal_likelihood(state, seed=1)
    assert np.isfinite(value)


# ------------------------------------------------------------ vfe + sparse


def test_vfe_collapse_to_exact():
    x, y, k = make_problem(120, 1, seed=23, noise=0.05)
    exact = log_marginal_likelihood(gp_fit(x, y, k, 0.05, "cholesky"))
    value, penalty = vfe_objective(x, y, k, 0.05, x.copy())
    assert abs(value - exact) / abs(exact) <= 1e-6
    assert penalty >= -1e-10


def test_vfe_is_a_lower_bound():
    x, y, k = make_problem(200, 2, seed=24)
    exact = log_marginal_likelihood(gp_fit(x, y, k, 0.1, "cholesky"))
    idx = farthest_point_sampling(x, 10)
    value, penalty = vfe_objective(x, y, k, 0.1, x[idx])
    assert value <= exact + 1e-8
    assert penalty >= -1e-10


def test_vfe_validation():
    x, y, k = make_problem(20, 2, seed=25)
    with pytest.raises(ValueError):
        vfe_objective(x, y, k, 0.1, np.vstack([x, x]))  # M > N
    with pytest.raises(DimensionMismatchError):
        vfe_objective(x, y[:10], k, 0.1, x[:5])
    with pytest.raises(DimensionMismatchError):
        vfe_objective(x, y, k, 0.1, np.ones((4, 3)))


def test_sparse_full_inducing_matches_exact():
    x, y, k = make_problem(120, 1, seed=26, noise=0.05)
    xs = np.random.default_rng(27).random((25, 1))
    exact = gp_fit(x, y, k, 0.05, "cholesky")
    mean_e, var_e = gp_predict(exact, xs)
    state = sparse_fit(x, y, k, 0.05, 120, OptimizerConfig(steps=0))
    mean_s, var_s = sparse_predict(state, xs)
    assert np.max(np.abs(mean_e - mean_s)) <= 1e-5
    assert np.max(np.abs(var_e - var_s)) <= 1e-5


def test_sparse_variance_never_exceeds_prior():
    x, y, k = make_problem(250, 2, seed=28)
    state = sparse_fit(x, y, k, 0.1, 40, OptimizerConfig(steps=0))
    xs = np.random.default_rng(29).random((60, 2))
    _, var = sparse_predict(state, xs)
    assert np.all(var <= 1.2 + 1e-8)  # prior diag of the Scale node
    assert np.all(var >= 0.0)


def test_sparse_far_point_prior_reversion():
    x, y, k = make_problem(100, 2, seed=30)
    state = sparse_fit(x, y, k, 0.1, 30, OptimizerConfig(steps=0))
    mean, var = sparse_predict(state, np.full((1, 2), 80.0))
    assert abs(mean[0]) <= 1e-6
    assert abs(var[0] - 1.2) <= 1e-6


def test_sparse_warm_refit_skips_fps():
    x, y, k = make_problem(150, 2, seed=31)
    cold = sparse_fit(x, y, k, 0.1, 25, OptimizerConfig(steps=0))
    before = farthest_point_sampling.calls
    warm = sparse_fit(x, y, k, 0.1, 25, OptimizerConfig(steps=0), warm=cold)
    assert farthest_point_sampling.calls == before  # zero new invocations
    np.testing.assert_array_equal(warm.z, cold.z)


def test_sparse_elbo_stored_and_bounded():
    x, y, k = make_problem(180, 2, seed=32)
    exact = log_marginal_likelihood(gp_fit(x, y, k, 0.1, "cholesky"))
    state = sparse_fit(x, y, k, 0.1, 30, OptimizerConfig(steps=0))
    assert state.elbo_value <= exact + 1e-8
    assert state.trace_penalty >= -1e-10


def test_sparse_rmse_close_to_exact_at_m200():
    # smooth generator: 200 inducing points track the exact model's error
    rng = np.random.default_rng(33)
    x = rng.random((5000, 1))
    k = Scale(1.0, RBF(0.5))
    y = sample_gp_targets(x, k, 0.05, rng)[:, 0]
    test = (np.arange(5000) % 5) == 4
    xtr, ytr, xte, yte = x[~test], y[~test], x[test], y[test]
    exact = gp_fit(xtr, ytr, k, 0.05, "cholesky")
    rmse_e = metrics(*gp_predict(exact, xte), 0.05, yte)[0]
    state = sparse_fit(xtr, ytr, k, 0.05, 200, OptimizerConfig(steps=0))
    rmse_s = metrics(*sparse_predict(state, xte), 0.05, yte)[0]
    assert rmse_s <= 1.15 * rmse_e


def test_sparse_optimization_improves_elbo():
    x, y, k = make_problem(150, 1, seed=34, kernel=Scale(1.0, RBF(0.8)), noise=0.05)
    flat = sparse_fit(x, y, k, 0.3, 30, OptimizerConfig(steps=0))
    tuned = sparse_fit(x, y, k, 0.3, 30, OptimizerConfig(steps=25))
    assert tuned.elbo_value >= flat.elbo_value


# ------------------------------------------------- farthest_point_sampling


def test_fps_all_points():
    x = np.random.default_rng(35).random((6, 2))
    idx = farthest_point_sampling(x, 6)
    assert sorted(idx) == list(range(6))


def test_fps_line_example():
    x = np.array([[0.0], [1.0], [10.0]])
    assert list(farthest_point_sampling(x, 2)) == [0, 2]


def test_fps_matches_bruteforce():
    rng = np.random.default_rng(36)
    x = rng.standard_normal((100, 3))
    got = list(farthest_point_sampling(x, 10))

    # quadratic reference: greedy max-min, ties to lowest index
    chosen = [0]
    for _ in range(9):
        best_i, best_d = None, -1.0
        for i in range(100):
            if i in chosen:
                continue
            d = min(float(np.sum((x[i] - x[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
    assert got == chosen


def test_fps_validation_and_counter():
    x = np.random.default_rng(37).random((5, 2))
    with pytest.raises(ValueError):
        farthest_point_sampling(x, 6)
    before = farthest_point_sampling.calls
    farthest_point_sampling(x, 3)
    assert farthest_point_sampling.calls == before + 1


# ---------------------------------------------------- optimize_hyperparams


def test_optimizer_constant_objective_flat():
    p0 = np.array([0.3, -0.7])
    cfg = OptimizerConfig(steps=5)
    p, trace = optimize_hyperparams(lambda p: 1.0, p0, cfg)
    np.testing.assert_array_equal(p, p0)
    assert trace == [1.0] * 5
    assert cfg.evaluations == 5 * (2 * 2 + 1)


def test_optimizer_reaches_quadratic_optimum():
    cfg = OptimizerConfig(steps=200)
    p, trace = optimize_hyperparams(
        lambda p: -float(np.sum((p - 1.0) ** 2)), np.zeros(3), cfg
    )
    assert np.max(np.abs(p - 1.0)) <= 0.05
    # best-seen is non-decreasing
    best = np.maximum.accumulate(trace)
    assert best[-1] >= best[0]


def test_optimizer_budget_10_params_21_evals():
    k = Sum(
        Sum(Scale(1.0, RBF(1.0)), Scale(1.0, Periodic(1.0, 1.0))),
        Sum(Scale(1.0, Matern32(1.0)), Scale(1.0, Matern32(2.0))),
    )
    p0 = flatten_model_params(k, 0.1)
    assert len(p0) == 10
    cfg = OptimizerConfig(steps=1)
    optimize_hyperparams(lambda p: -float(p @ p), p0, cfg)
    assert cfg.evaluations == 21


def test_optimizer_aborts_on_non_finite():
    calls = []

    def objective(p):
        calls.append(1)
        if len(calls) > 7:
            return math.nan
        return -float(p @ p)

    cfg = OptimizerConfig(steps=50)
    p, trace = optimize_hyperparams(objective, np.ones(1), cfg)
    assert len(trace) < 50
    assert np.all(np.isfinite(p))


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(steps=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(fd_epsilon=-1e-4)


def test_model_param_vector_appends_noise_last():
    k = Scale(2.0, RBF(0.5))
    p = flatten_model_params(k, 0.04)
    np.testing.assert_allclose(p[:2], flatten_params(k), atol=1e-15)
    assert abs(p[-1] - math.log(0.04)) <= 1e-12
    k2, noise2 = unflatten_model_params(k, p)
    assert abs(noise2 - 0.04) <= 1e-15
    np.testing.assert_array_equal(flatten_params(k2), flatten_params(k))


# ----------------------------------------------------------------- metrics


def test_metrics_perfect_predictions_pinned_nll():
    y = np.array([1.0, -2.0, 0.5])
    var = np.full(3, 1.0 / (2.0 * math.pi) - 0.01)
    rmse, nll, cov = metrics(y, var, 0.01, y)
    assert rmse == 0.0
    assert abs(nll) <= 1e-12  # 0.5 log(2 pi * 1/(2 pi)) = 0
    assert cov == 1.0


def test_metrics_huge_variance_full_coverage():
    rng = np.random.default_rng(38)
    y = rng.standard_normal(50)
    mean = rng.standard_normal(50)
    _, _, cov = metrics(mean, np.full(50, 1e8), 0.1, y)
    assert cov == 1.0


def test_metrics_single_point_gaussian_density():
    rmse, nll, cov = metrics(np.array([0.0]), np.array([0.5]), 0.5, np.array([1.0]))
    assert abs(nll - (0.5 * LOG_2PI + 0.5)) <= 1e-12
    assert rmse == 1.0
    assert cov == 1.0  # 1.0 < 1.96


def test_metrics_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        metrics(np.zeros(3), np.zeros(3), 0.1, np.zeros(4))
