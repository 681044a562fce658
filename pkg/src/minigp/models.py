"""Gaussian-process regression models.

Exact inference with three interchangeable solver strategies (direct
Cholesky, matrix-free conjugate gradients, grid interpolation for 1-d
data), a sparse variational model with farthest-point inducing
initialization, joint kernel+noise hyperparameter optimization by Adam on
central finite differences, and prediction metrics.

The prior mean is identically zero. Predictive variances are latent
(noise-free); add the noise variance for observation intervals.
Hyperparameters travel as one log-space vector: kernel parameters in
pre-order followed by the noise variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .kernels import (
    flatten_params,
    is_stationary,
    kernel_diag,
    kernel_eval,
    n_params,
    unflatten_params,
)
from .linalg import (
    CholeskyFactor,
    as_matrix,
    as_vector,
    cholesky,
    logdet_from_chol,
    tracked,
    trisolve,
)
from .solvers import CgConfig, SkiState, build_ski, cg_solve, matrix_free_matvec, ski_matvec, slq_logdet

# Strategy auto-selection and operator-representation thresholds.
AUTO_CHOLESKY_MAX = 4000
DENSE_OPERATOR_MAX = 2048  # CG keeps a dense Gram below this, streams slabs above
CG_FIT_BLOCK = 32  # slab rows for matrix-free fits; keeps CG peak memory well under 64*N*8
FIT_CG_TOLERANCE = 1e-8  # default relative residual for fit-time CG solves
SKI_GRID_CAP = 2**15

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ExactState:
    """Fitted exact GP. Treat all fields as read-only.

    alpha solves (K + noise*I) alpha = y under the strategy's operator;
    factor / gram_y / ski hold whichever representation the strategy
    caches so predict never refactorizes training data.
    """

    x_train: np.ndarray
    y_train: np.ndarray
    kernel: object
    noise: float
    strategy: str
    alpha: np.ndarray
    factor: CholeskyFactor | None = None
    gram_y: np.ndarray | None = None
    ski: SkiState | None = None
    cg_iterations: int | None = None
    cg_final_residual: float | None = None
    cg_config: CgConfig | None = None


@dataclass(frozen=True)
class SparseState:
    """Fitted sparse variational GP (inducing-point posterior cache)."""

    z: np.ndarray
    kernel: object
    noise: float
    luu: CholeskyFactor
    lb: CholeskyFactor
    c: np.ndarray
    elbo_value: float
    trace_penalty: float


@dataclass
class OptimizerConfig:
    """Adam settings for derivative-free (central-difference) ascent.

    evaluations is written by optimize_hyperparams: the number of
    objective calls made, steps * (2 P + 1) for P parameters.
    """

    steps: int = 100
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fd_epsilon: float = 1e-4
    evaluations: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if min(self.learning_rate, self.fd_epsilon, self.eps) <= 0:
            raise ValueError("learning_rate, fd_epsilon and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta coefficients must lie in (0, 1)")


def _check_noise(noise):
    noise = float(noise)
    if not math.isfinite(noise) or noise <= 0:
        raise ValueError("noise variance must be positive and finite")
    return noise


def default_ski_grid(n):
    """Grid size rule: max(128, next power of two >= 4 sqrt(N)), <= 2**15."""
    target = 4.0 * math.sqrt(n)
    m = 128
    while m < target and m < SKI_GRID_CAP:
        m *= 2
    return m


def _resolve_strategy(strategy, n, d, kernel):
    s = str(strategy).lower()
    if s == "auto":
        if n <= AUTO_CHOLESKY_MAX:
            return "cholesky"
        if d == 1 and is_stationary(kernel):
            return "ski"
        return "cg"
    if s not in ("cholesky", "cg", "ski"):
        raise ValueError(f"unknown strategy {strategy!r}")
    return s


def gp_fit(x, y, kernel, noise, strategy="auto", *, cg_config=None, grid_size=None):
    """Fit an exact GP: cache the alpha weights and solver state.

    strategy is one of "cholesky", "cg", "ski", or "auto" (cholesky up to
    N=4000, then ski for 1-d stationary kernels, else cg). The ski
    strategy requires 1-d inputs. CG non-convergence is reported in
    cg_iterations / cg_final_residual on the returned state, not raised.
    """
    x = as_matrix(x, "X")
    y = as_vector(y, "y")
    n, d = x.shape
    if y.shape[0] != n:
        raise DimensionMismatchError(f"y has length {y.shape[0]}, X has {n} rows")
    if n < 1:
        raise DimensionMismatchError("need at least one training point")
    noise = _check_noise(noise)
    resolved = _resolve_strategy(strategy, n, d, kernel)

    if resolved == "cholesky":
        gram = kernel_eval(kernel, x)
        gram.flat[:: n + 1] += noise
        factor = cholesky(gram)
        del gram
        half = trisolve(factor, y, "lower")
        alpha = trisolve(factor, half, "upper-transposed")
        return ExactState(x, y, kernel, noise, resolved, alpha, factor=factor)

    # fitting solves run tighter than the general-purpose default so the
    # cached alpha tracks the direct factorization to ~1e-6
    cfg = cg_config if cg_config is not None else CgConfig(rel_tolerance=FIT_CG_TOLERANCE)
    if resolved == "cg":
        if n <= DENSE_OPERATOR_MAX:
            gram_y = kernel_eval(kernel, x)
            gram_y.flat[:: n + 1] += noise
            result = cg_solve(lambda v: gram_y @ v, y, cfg)
            return ExactState(
                x, y, kernel, noise, resolved, result.x, gram_y=gram_y,
                cg_iterations=result.iterations,
                cg_final_residual=result.final_residual, cg_config=cfg,
            )
        apply = lambda v: matrix_free_matvec(kernel, x, noise, v, block=CG_FIT_BLOCK)
        result = cg_solve(apply, y, cfg)
        return ExactState(
            x, y, kernel, noise, resolved, result.x,
            cg_iterations=result.iterations,
            cg_final_residual=result.final_residual, cg_config=cfg,
        )

    if d != 1:
        raise DimensionMismatchError("ski strategy requires 1-d inputs")
    m = default_ski_grid(n) if grid_size is None else int(grid_size)
    state = build_ski(x, kernel, m)
    result = cg_solve(lambda v: ski_matvec(state, noise, v), y, cfg)
    return ExactState(
        x, y, kernel, noise, resolved, result.x, ski=state,
        cg_iterations=result.iterations,
        cg_final_residual=result.final_residual, cg_config=cfg,
    )


def _operator(state):
    """The strategy's K_y matvec, for solves done after fitting."""
    if state.strategy == "cg":
        if state.gram_y is not None:
            return lambda v: state.gram_y @ v
        return lambda v: matrix_free_matvec(
            state.kernel, state.x_train, state.noise, v, block=CG_FIT_BLOCK
        )
    if state.strategy == "ski":
        return lambda v: ski_matvec(state.ski, state.noise, v)
    return None


def gp_predict(state, x_star):
    """Posterior mean and latent variance at the test inputs.

    Variance is the noise-free posterior marginal, clamped at zero; add
    state.noise for the predictive variance of observations.
    """
    x_star = as_matrix(x_star, "X*")
    if x_star.shape[1] != state.x_train.shape[1]:
        raise DimensionMismatchError(
            f"test inputs have {x_star.shape[1]} columns, training had"
            f" {state.x_train.shape[1]}"
        )
    t = x_star.shape[0]
    if t == 0:
        return tracked(np.zeros(0)), tracked(np.zeros(0))

    kstar = kernel_eval(state.kernel, state.x_train, x_star)  # N x T
    mean = tracked(kstar.T @ state.alpha)
    prior = kernel_diag(state.kernel, x_star)

    if state.strategy == "cholesky":
        half = trisolve(state.factor, kstar, "lower")
        quad = np.einsum("ij,ij->j", half, half)
    else:
        apply = _operator(state)
        cfg = state.cg_config if state.cg_config is not None else CgConfig()
        quad = np.empty(t)
        for j in range(t):
            col = kstar[:, j]
            sol = cg_solve(apply, col, cfg)
            quad[j] = col @ sol.x
    var = prior
    var -= quad
    np.maximum(var, 0.0, out=var)
    return mean, var


def log_marginal_likelihood(state, seed=0):
    """Evidence of the training targets under the fitted prior.

    The cholesky strategy is exact; cg and ski strategies estimate the
    log-determinant by stochastic Lanczos quadrature with the given seed.
    """
    n = state.y_train.shape[0]
    quad = float(state.y_train @ state.alpha)
    if state.strategy == "cholesky":
        ld = logdet_from_chol(state.factor)
    else:
        cfg = state.cg_config if state.cg_config is not None else CgConfig()
        ld = slq_logdet(_operator(state), n, cfg, seed=seed)
    return -0.5 * (quad + ld + n * LOG_2PI)


def _vfe_factors(x, y, kernel, noise, z):
    """Shared inducing-point algebra: factors, weights, bound value."""
    sigma = math.sqrt(noise)
    kuu = kernel_eval(kernel, z)
    luu = cholesky(kuu)
    del kuu
    kuf = kernel_eval(kernel, z, x)
    a = trisolve(luu, kuf, "lower")
    del kuf
    a /= sigma
    m = z.shape[0]
    b = tracked(a @ a.T)
    b.flat[:: m + 1] += 1.0
    lb = cholesky(b)
    del b
    ay = a @ y
    c = trisolve(lb, ay, "lower")
    c /= sigma

    n = x.shape[0]
    logdet = n * math.log(noise) + 2.0 * np.sum(np.log(np.diag(lb.L)))
    # c already carries both 1/sigma factors, so only y'y needs the scale
    quad = float(y @ y) / noise - float(c @ c)
    bound_gauss = -0.5 * (quad + logdet + n * LOG_2PI)
    trace_knn = float(np.sum(kernel_diag(kernel, x)))
    trace_q = noise * float(np.sum(a * a))
    penalty = (trace_knn - trace_q) / (2.0 * noise)
    return luu, lb, tracked(np.ascontiguousarray(c)), bound_gauss - penalty, penalty


def vfe_objective(x, y, kernel, noise, z):
    """Variational free-energy lower bound on the log marginal likelihood.

    Returns (value, trace_penalty). The penalty term is the divergence
    charge tr(K - Q) / (2 noise); it vanishes when the inducing inputs
    coincide with the training inputs and the bound then equals the exact
    evidence.
    """
    x = as_matrix(x, "X")
    y = as_vector(y, "y")
    z = as_matrix(z, "Z")
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatchError("y length must match X rows")
    if z.shape[1] != x.shape[1]:
        raise DimensionMismatchError("Z and X must share column count")
    if z.shape[0] > x.shape[0]:
        raise ValueError("more inducing points than training points")
    noise = _check_noise(noise)
    _, _, _, value, penalty = _vfe_factors(x, y, kernel, noise, z)
    return value, penalty


def farthest_point_sampling(x, m):
    """Greedy max-min point selection, seeded at index 0, ties to the
    lowest index. Returns the chosen row indices in selection order."""
    farthest_point_sampling.calls += 1
    x = as_matrix(x, "X")
    n = x.shape[0]
    m = int(m)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= M <= N, got M={m}, N={n}")
    chosen = [0]
    diff = x - x[0]
    dist = np.einsum("ij,ij->i", diff, diff)
    dist[0] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        diff = x - x[nxt]
        cand = np.einsum("ij,ij->i", diff, diff)
        np.minimum(dist, cand, out=dist)
        dist[nxt] = -1.0
    return chosen


farthest_point_sampling.calls = 0


def flatten_model_params(kernel, noise):
    """Joint log-space vector: kernel hyperparameters then noise variance."""
    return tracked(np.append(flatten_params(kernel), math.log(noise)))


def unflatten_model_params(kernel, values):
    """Inverse of flatten_model_params; returns (kernel, noise)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n_params(kernel) + 1,):
        raise DimensionMismatchError(
            f"expected {n_params(kernel) + 1} values, got {values.shape}"
        )
    return unflatten_params(kernel, values[:-1]), float(np.exp(values[-1]))


def optimize_hyperparams(objective, p0, config):
    """Maximize a scalar objective over a log-space parameter vector.

    Adam ascent; the gradient comes from central finite differences, so
    each step spends exactly 2 P + 1 objective evaluations (one at the
    center, two per coordinate). Returns (best-seen parameters, trace of
    center values). A non-finite objective value aborts and returns the
    best seen so far. config.evaluations is reset, then counts calls.
    """
    p = np.array(p0, dtype=np.float64, copy=True)
    if p.ndim != 1:
        raise DimensionMismatchError("parameter vector must be 1-d")
    dim = p.shape[0]
    config.evaluations = 0

    def f(q):
        config.evaluations += 1
        return float(objective(q))

    m = np.zeros(dim)
    v = np.zeros(dim)
    trace = []
    best_p = p.copy()
    best_val = -np.inf
    for step in range(1, config.steps + 1):
        center = f(p)
        if not math.isfinite(center):
            break
        trace.append(center)
        if center > best_val:
            best_val = center
            best_p = p.copy()
        grad = np.empty(dim)
        bad = False
        for i in range(dim):
            shifted = p.copy()
            shifted[i] += config.fd_epsilon
            hi = f(shifted)
            shifted[i] = p[i] - config.fd_epsilon
            lo = f(shifted)
            if not (math.isfinite(hi) and math.isfinite(lo)):
                bad = True
                break
            grad[i] = (hi - lo) / (2.0 * config.fd_epsilon)
        if bad:
            break
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
        mhat = m / (1.0 - config.beta1**step)
        vhat = v / (1.0 - config.beta2**step)
        p = p + config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    return tracked(best_p), trace


def sparse_fit(x, y, kernel, noise, m, opt, warm=None):
    """Fit the sparse variational model with M inducing points.

    Cold fits pick inducing inputs by farthest-point sampling; a warm
    state reuses its inducing inputs verbatim and skips that step. Kernel
    and noise hyperparameters are then optimized jointly on the bound
    (opt.steps may be 0 to keep them fixed); inducing inputs stay put.
    """
    x = as_matrix(x, "X")
    y = as_vector(y, "y")
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatchError("y length must match X rows")
    noise = _check_noise(noise)
    if warm is not None:
        z = warm.z
        if z.shape[1] != x.shape[1]:
            raise DimensionMismatchError("warm state dimensionality mismatch")
    else:
        idx = farthest_point_sampling(x, m)
        z = tracked(x[idx].copy())

    if opt.steps > 0:
        def objective(p):
            k_try, noise_try = unflatten_model_params(kernel, p)
            return _vfe_factors(x, y, k_try, noise_try, z)[3]

        p0 = flatten_model_params(kernel, noise)
        best, _ = optimize_hyperparams(objective, p0, opt)
        kernel, noise = unflatten_model_params(kernel, best)

    luu, lb, c, value, penalty = _vfe_factors(x, y, kernel, noise, z)
    return SparseState(z, kernel, noise, luu, lb, c, value, penalty)


def sparse_predict(state, x_star):
    """Posterior mean and latent variance of the sparse model."""
    x_star = as_matrix(x_star, "X*")
    if x_star.shape[1] != state.z.shape[1]:
        raise DimensionMismatchError(
            f"test inputs have {x_star.shape[1]} columns, model has"
            f" {state.z.shape[1]}"
        )
    if x_star.shape[0] == 0:
        return tracked(np.zeros(0)), tracked(np.zeros(0))
    kus = kernel_eval(state.kernel, state.z, x_star)  # M x T
    tmp1 = trisolve(state.luu, kus, "lower")
    tmp2 = trisolve(state.lb, tmp1, "lower")
    mean = tracked(tmp2.T @ state.c)
    var = kernel_diag(state.kernel, x_star)
    var -= np.einsum("ij,ij->j", tmp1, tmp1)
    var += np.einsum("ij,ij->j", tmp2, tmp2)
    np.maximum(var, 0.0, out=var)
    return mean, var


def metrics(mean, var_latent, noise, y_true):
    """(rmse, mean negative log likelihood, 95% coverage) of predictions.

    var_latent is the noise-free predictive variance; the noise variance
    is added internally to score observations.
    """
    mean = as_vector(mean, "mean")
    var_latent = as_vector(var_latent, "var")
    y_true = as_vector(y_true, "y")
    if not (mean.shape == var_latent.shape == y_true.shape):
        raise DimensionMismatchError("metrics inputs must share length")
    s2 = var_latent + float(noise)
    err = y_true - mean
    rmse = float(np.sqrt(np.mean(err * err)))
    nll = float(np.mean(0.5 * np.log(2.0 * math.pi * s2) + err * err / (2.0 * s2)))
    coverage = float(np.mean(np.abs(err) <= 1.96 * np.sqrt(s2)))
    return rmse, nll, coverage
