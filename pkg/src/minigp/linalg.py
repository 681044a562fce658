"""Dense linear-algebra and FFT primitives shared by every solver.

Arrays are plain C-contiguous float64 ``numpy.ndarray`` objects: matrices are
2-d, vectors 1-d. Every buffer a public operation allocates and returns (or
keeps alive inside fitted state) is registered with a process-global
:class:`AllocationLedger`, which is how the memory-scaling behavior of the
solvers is observed portably: the ledger counts live library buffers and
their high-water mark, not OS-level RSS.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatchError,
    NonFiniteError,
    NonSquareError,
    NonSymmetricError,
    NotPositiveDefiniteError,
    SingularTriangularError,
)

# Diagonal jitter escalation for barely-indefinite symmetric inputs:
# start at JITTER_BASE * mean(diag), grow by JITTER_GROWTH, give up after
# JITTER_ESCALATIONS growth steps.
JITTER_BASE = 1e-10
JITTER_GROWTH = 10.0
JITTER_ESCALATIONS = 3

SYMMETRY_RTOL = 1e-8


class AllocationLedger:
    """Thread-safe counter of live library-allocated buffer bytes.

    ``current_bytes`` is the total size of registered buffers still alive;
    ``peak_bytes`` is the high-water mark since the last :meth:`reset_peak`.
    Registration happens once per buffer (at its allocation site) and the
    matching release is driven by a weakref finalizer, so plain refcounting
    keeps the counter exact without any explicit free calls.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current_bytes = 0
        self.peak_bytes = 0

    def register(self, nbytes):
        with self._lock:
            self.current_bytes += nbytes
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes

    def release(self, nbytes):
        with self._lock:
            self.current_bytes -= nbytes

    def reset_peak(self):
        """Start a fresh measurement window: peak := current."""
        with self._lock:
            self.peak_bytes = self.current_bytes


#: Process-global ledger used by the whole library.
LEDGER = AllocationLedger()


def tracked(arr):
    """Register a freshly allocated array with the global ledger.

    Call exactly once per allocation; the buffer deregisters itself when
    garbage collected. Returns the array for chaining.
    """
    nbytes = arr.nbytes
    LEDGER.register(nbytes)
    weakref.finalize(arr, LEDGER.release, nbytes)
    return arr


def _require_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or infinite entries")


def as_matrix(x, name="matrix"):
    """Validate user input as a finite 2-d float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-d, got ndim={a.ndim}")
    _require_finite(a, name)
    return np.ascontiguousarray(a)


def as_vector(x, name="vector"):
    """Validate user input as a finite 1-d float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-d, got ndim={a.ndim}")
    _require_finite(a, name)
    return np.ascontiguousarray(a)


def matmul(a, b, transpose_a=False, transpose_b=False):
    """Matrix product with optional transposes.

    Transposed operands are materialized as contiguous copies before the
    product, so ``matmul(A, B, transpose_a=True)`` is bit-identical to
    multiplying an explicitly transposed copy of ``A``. Repeated calls on
    identical inputs produce identical bytes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatchError("matmul operands must be 2-d")
    a2 = np.ascontiguousarray(a.T) if transpose_a else a
    b2 = np.ascontiguousarray(b.T) if transpose_b else b
    if a2.shape[1] != b2.shape[0]:
        raise DimensionMismatchError(
            f"matmul inner dimensions disagree: {a2.shape} x {b2.shape}"
        )
    return tracked(a2 @ b2)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T = A + jitter_used * I."""

    L: np.ndarray
    jitter_used: float

    @property
    def order(self):
        return self.L.shape[0]


def cholesky(a):
    """Cholesky factorization with diagonal jitter escalation.

    The input must be square and symmetric to ``SYMMETRY_RTOL`` (relative to
    its largest entry). A first attempt runs with no jitter; if LAPACK
    reports an indefinite matrix, jitter starts at
    ``JITTER_BASE * mean(diag)`` and grows by ``JITTER_GROWTH`` up to
    ``JITTER_ESCALATIONS`` times before giving up.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NonSquareError(f"cholesky requires a square matrix, got {a.shape}")
    _require_finite(a, "matrix")
    n = a.shape[0]
    scale = np.abs(a).max() if n else 0.0
    if scale > 0 and np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise NonSymmetricError("cholesky requires a symmetric matrix")

    mean_diag = float(np.trace(a)) / n if n else 0.0
    base = JITTER_BASE * max(mean_diag, np.finfo(np.float64).tiny)
    jitters = [0.0] + [base * JITTER_GROWTH**k for k in range(JITTER_ESCALATIONS + 1)]
    last = 0.0
    for jitter in jitters:
        last = jitter
        if jitter == 0.0:
            work = a
        else:
            work = tracked(a.copy())
            work.flat[:: n + 1] += jitter
        try:
            ell = np.linalg.cholesky(work)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(L=tracked(ell), jitter_used=jitter)
    raise NotPositiveDefiniteError(
        f"matrix is not positive definite (jitter up to {last:g} tried)",
        jitter_tried=last,
    )


def trisolve(factor, b, mode="lower"):
    """Solve L @ X = B (``mode='lower'``) or L.T @ X = B (``'upper-transposed'``).

    ``factor`` may be a :class:`CholeskyFactor` or a bare lower-triangular
    matrix. ``b`` may be a vector or a matrix of right-hand sides.
    """
    ell = factor.L if isinstance(factor, CholeskyFactor) else np.asarray(factor)
    if ell.ndim != 2 or ell.shape[0] != ell.shape[1]:
        raise NonSquareError("triangular factor must be square")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != ell.shape[0]:
        raise DimensionMismatchError(
            f"rhs has {b.shape[0]} rows, factor order is {ell.shape[0]}"
        )
    if mode not in ("lower", "upper-transposed"):
        raise ValueError(f"unknown trisolve mode: {mode!r}")
    if ell.shape[0] and np.abs(np.diag(ell)).min() == 0.0:
        raise SingularTriangularError("triangular factor has a zero diagonal entry")
    x = scipy.linalg.solve_triangular(
        ell, b, lower=True, trans="T" if mode == "upper-transposed" else "N",
        check_finite=False,
    )
    return tracked(np.ascontiguousarray(x))


def pairwise_sqdist(x, y):
    """All-pairs squared Euclidean distances via one matrix product.

    Entry (i, j) is ||x_i||^2 + ||y_j||^2 - 2 x_i . y_j; negatives produced
    by cancellation are clamped to zero. When ``y is x`` the result is made
    exactly symmetric with an exactly-zero diagonal.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionMismatchError("pairwise_sqdist operands must be 2-d")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(
            f"column counts disagree: {x.shape[1]} vs {y.shape[1]}"
        )
    same = y is x
    xn = np.einsum("ij,ij->i", x, x)
    yn = xn if same else np.einsum("ij,ij->i", y, y)
    out = matmul(x, y, transpose_b=True)
    out *= -2.0
    out += xn[:, None]
    out += yn[None, :]
    np.maximum(out, 0.0, out=out)
    if same:
        sym = tracked(out + out.T)
        sym *= 0.5
        np.fill_diagonal(sym, 0.0)
        out = sym
    return out


def _is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


def fft_circulant_matvec(first_col, v):
    """Multiply the circulant matrix defined by ``first_col`` against ``v``.

    Computed as ifft(fft(first_col) * fft(v)); the imaginary residue of the
    inverse transform must stay below 1e-8 times the result's max magnitude
    and is then discarded. Lengths must be a power of two.
    """
    first_col = np.asarray(first_col, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if first_col.ndim != 1 or v.ndim != 1:
        raise DimensionMismatchError("circulant matvec operands must be 1-d")
    if first_col.shape != v.shape:
        raise DimensionMismatchError("first column and vector lengths differ")
    if not _is_power_of_two(first_col.shape[0]):
        raise ValueError(f"length {first_col.shape[0]} is not a power of two")
    return circulant_spectrum_matvec(np.fft.fft(first_col), v)


def circulant_spectrum_matvec(spectrum, v):
    """Circulant matvec from a precomputed FFT of the first column."""
    w = np.fft.ifft(spectrum * np.fft.fft(v))
    res = np.ascontiguousarray(w.real)
    im_max = np.abs(w.imag).max() if w.shape[0] else 0.0
    if im_max > 1e-8 * max(np.abs(res).max(), np.finfo(np.float64).tiny):
        raise ValueError(
            f"imaginary residue {im_max:g} exceeds tolerance; inputs not real-circulant"
        )
    return tracked(res)


def logdet_from_chol(factor):
    """log det(A) from a Cholesky factor of A: 2 * sum(log diag(L))."""
    ell = factor.L if isinstance(factor, CholeskyFactor) else np.asarray(factor)
    return float(2.0 * np.sum(np.log(np.diag(ell))))
