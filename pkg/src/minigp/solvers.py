"""Linear-algebra engines behind the model layer.

Four ways to apply or invert the regularized Gram matrix K + noise*I:

* direct Cholesky factorization (see :mod:`minigp.linalg`),
* :func:`matrix_free_matvec`, which streams row slabs of K and never holds
  the full matrix, enabling :func:`cg_solve` at O(N) memory,
* :func:`slq_logdet`, a stochastic Lanczos quadrature estimate of
  log det(K + noise*I) from Rademacher probes,
* :func:`build_ski` / :func:`ski_matvec`, which interpolate onto a regular
  1-d grid whose Gram matrix is Toeplitz and multiply it through a
  power-of-two circulant embedding and the FFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import DimensionMismatchError, OperatorNotSpdError
from .kernels import is_stationary, kernel_eval, slab_buffer_count
from .linalg import as_matrix, as_vector, circulant_spectrum_matvec, tracked


@dataclass
class CgConfig:
    """Iterative-solver settings shared by CG and the SLQ estimator.

    max_iterations of None resolves to min(N, 1000) at solve time. probes
    and lanczos_steps only matter for slq_logdet.
    """

    rel_tolerance: float = 1e-6
    max_iterations: int | None = None
    probes: int = 16
    lanczos_steps: int = 50

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.probes < 1 or self.lanczos_steps < 1:
            raise ValueError("probes and lanczos_steps must be at least 1")


class CgResult(NamedTuple):
    x: np.ndarray
    iterations: int
    final_residual: float


def matrix_free_matvec(kernel, x, noise, v, block=256):
    """(K + noise*I) @ v without materializing the N x N Gram matrix.

    Rows of K are produced in slabs and discarded after use. ``block`` is
    the memory budget in slab rows: a kernel tree needing several scratch
    buffers per slab gets proportionally fewer rows, so peak slab bytes
    stay <= block*N*8 regardless of tree shape.
    """
    x = as_matrix(x, "X")
    v = as_vector(v, "v")
    n = x.shape[0]
    if v.shape[0] != n:
        raise DimensionMismatchError(f"v has length {v.shape[0]}, X has {n} rows")
    noise = float(noise)
    if not np.isfinite(noise) or noise < 0:
        raise ValueError("noise must be finite and nonnegative")
    if block < 1:
        raise ValueError("block must be at least 1")
    rows = max(1, int(block) // slab_buffer_count(kernel))
    out = tracked(np.empty(n))
    for i0 in range(0, n, rows):
        i1 = min(i0 + rows, n)
        slab = kernel._gram(x[i0:i1], x)
        np.dot(slab, v, out=out[i0:i1])
        del slab  # free before the next slab is allocated
    if noise != 0.0:
        out += noise * v
    return out


def cg_solve(apply, b, config=None):
    """Unpreconditioned conjugate gradients for SPD operators.

    ``apply`` is any callable v -> A @ v. Stops when the recurrence
    residual drops below rel_tolerance * ||b||, or at max_iterations
    (reported in the result, not an error).
    """
    cfg = config if config is not None else CgConfig()
    b = as_vector(b, "b")
    n = b.shape[0]
    max_iter = cfg.max_iterations if cfg.max_iterations is not None else min(n, 1000)
    x = tracked(np.zeros(n))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CgResult(x, 0, 0.0)
    tol = cfg.rel_tolerance * bnorm
    r = tracked(b.copy())
    p = tracked(b.copy())
    rs = float(r @ r)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        ap = apply(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise OperatorNotSpdError(
                f"CG breakdown: p.A.p = {pap:g} is not positive"
            )
        step = rs / pap
        x += step * p
        r -= step * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol:
            return CgResult(x, iterations, float(np.sqrt(rs_new)))
        p *= rs_new / rs
        p += r
        rs = rs_new
    return CgResult(x, iterations, float(np.sqrt(rs)))


def _lanczos_quadrature(apply, z, steps):
    """Gauss quadrature of log at the spectrum, seen from direction z.

    Runs ``steps`` Lanczos iterations from z/||z|| with one classical
    full-reorthogonalization pass per step, eigendecomposes the resulting
    tridiagonal matrix, and returns sum_i tau_i1^2 log(lambda_i), the
    first-component quadrature for the normalized start vector.
    """
    n = z.shape[0]
    q = z / np.linalg.norm(z)
    basis = tracked(np.zeros((steps, n)))
    alphas, betas = [], []
    for j in range(steps):
        basis[j] = q
        w = apply(q)
        a = float(q @ w)
        alphas.append(a)
        w = w - a * q
        if j > 0:
            w -= betas[-1] * basis[j - 1]
        active = basis[: j + 1]
        w -= active.T @ (active @ w)
        if j == steps - 1:
            break
        bnext = float(np.linalg.norm(w))
        if bnext <= 1e-12 * max(1.0, abs(a)):
            break  # invariant subspace found; T is exact at this size
        betas.append(bnext)
        q = w / bnext
    lam, vec = scipy.linalg.eigh_tridiagonal(alphas, betas)
    if lam.min() <= 0.0:
        raise OperatorNotSpdError(
            f"nonpositive Ritz value {lam.min():g}; operator is not positive definite"
        )
    tau = vec[0]
    return float(np.sum(tau * tau * np.log(lam)))


def slq_logdet(apply, n, config=None, seed=0):
    """Stochastic Lanczos quadrature estimate of log det(A), A SPD of order n.

    Averages the first-component Lanczos quadrature over ``config.probes``
    Rademacher probe vectors; each probe contributes ||z||^2 = n times its
    quadrature value. Deterministic given the seed (one child stream per
    probe, so estimates are reproducible regardless of probe count).
    """
    cfg = config if config is not None else CgConfig()
    steps = min(cfg.lanczos_steps, n)
    total = 0.0
    for child in np.random.SeedSequence(seed).spawn(cfg.probes):
        rng = np.random.Generator(np.random.PCG64(child))
        z = tracked(rng.integers(0, 2, size=n) * 2.0 - 1.0)
        total += n * _lanczos_quadrature(apply, z, steps)
    return total / cfg.probes


@dataclass(frozen=True)
class SkiState:
    """Grid-interpolation operator cache for 1-d stationary kernels.

    weights holds the N x m sparse interpolation matrix W in compressed
    row form, exactly 4 stored entries per row (cubic convolution stencil,
    each row summing to 1). The grid Gram matrix is Toeplitz, represented
    by its first column and by the FFT of its power-of-two circulant
    embedding, so W K_grid W^T v costs O(N + m log m).
    """

    grid_lo: float
    grid_hi: float
    grid_size: int
    spacing: float
    weights: scipy.sparse.csr_matrix
    toeplitz_first_col: np.ndarray
    circulant_spectrum: np.ndarray
    n_train: int


def _keys_cubic_weights(u):
    # Cubic convolution (a = -0.5) stencil weights at offsets -1..2 for a
    # point sitting u of the way into its grid cell, u in [0, 1].
    w_m1 = ((-0.5 * (u + 1) + 2.5) * (u + 1) - 4.0) * (u + 1) + 2.0
    w_0 = (1.5 * u - 2.5) * u * u + 1.0
    t = 1.0 - u
    w_p1 = (1.5 * t - 2.5) * t * t + 1.0
    s = 2.0 - u
    w_p2 = ((-0.5 * s + 2.5) * s - 4.0) * s + 2.0
    return w_m1, w_0, w_p1, w_p2


def _next_pow2(n):
    c = 1
    while c < n:
        c *= 2
    return c


def build_ski(x, kernel, grid_size):
    """Place an equispaced grid over 1-d data and cache the SKI operator.

    The grid extends two cells beyond the data on each side so the 4-point
    interpolation stencil never leaves the grid.
    """
    x = as_matrix(x, "X")
    if x.shape[1] != 1:
        raise DimensionMismatchError("SKI requires 1-d inputs (X must be N x 1)")
    m = int(grid_size)
    if m < 8:
        raise ValueError("grid_size must be at least 8 for the cubic stencil")
    if not is_stationary(kernel):
        raise ValueError("SKI requires a stationary kernel (no linear terms)")
    n = x.shape[0]
    xs = x[:, 0]
    lo_data = float(xs.min())
    span = max(float(xs.max()) - lo_data, 1e-8)
    h = span / (m - 5)
    lo = lo_data - 2.0 * h
    grid = tracked(lo + h * np.arange(m, dtype=np.float64))

    t = (xs - lo) / h
    j0 = np.floor(t).astype(np.int64)
    np.clip(j0, 1, m - 3, out=j0)
    u = t - j0
    w_m1, w_0, w_p1, w_p2 = _keys_cubic_weights(u)
    data = tracked(np.empty(4 * n))
    data[0::4] = w_m1
    data[1::4] = w_0
    data[2::4] = w_p1
    data[3::4] = w_p2
    indices = tracked(np.empty(4 * n, dtype=np.int64))
    indices[0::4] = j0 - 1
    indices[1::4] = j0
    indices[2::4] = j0 + 1
    indices[3::4] = j0 + 2
    indptr = np.arange(n + 1, dtype=np.int64) * 4
    weights = scipy.sparse.csr_matrix((data, indices, indptr), shape=(n, m))

    first_col = tracked(kernel_eval(kernel, grid[:1, None], grid[:, None])[0].copy())
    c_len = _next_pow2(2 * m - 1)
    circ = tracked(np.zeros(c_len))
    circ[:m] = first_col
    circ[c_len - m + 1 :] = first_col[1:][::-1]
    spectrum = tracked(np.fft.fft(circ))
    return SkiState(
        grid_lo=lo,
        grid_hi=float(grid[-1]),
        grid_size=m,
        spacing=h,
        weights=weights,
        toeplitz_first_col=first_col,
        circulant_spectrum=spectrum,
        n_train=n,
    )


def _toeplitz_matvec(state, u):
    # Embed u in the circulant, multiply in the Fourier domain, truncate.
    m = state.grid_size
    padded = np.zeros(state.circulant_spectrum.shape[0])
    padded[:m] = u
    return circulant_spectrum_matvec(state.circulant_spectrum, padded)[:m]


def ski_matvec(state, noise, v):
    """(W K_grid W^T + noise*I) @ v in O(N + m log m)."""
    v = as_vector(v, "v")
    if v.shape[0] != state.n_train:
        raise DimensionMismatchError(
            f"v has length {v.shape[0]}, operator order is {state.n_train}"
        )
    u = state.weights.T @ v
    ku = _toeplitz_matvec(state, u)
    out = state.weights @ ku
    if noise != 0.0:
        out += float(noise) * v
    return tracked(np.ascontiguousarray(out))
