"""Gaussian process regression with explicit memory accounting.

Four inference routes behind one fitting call: dense Cholesky, conjugate
gradients on a matrix-free operator, structured kernel interpolation on a
regular grid, and a variational inducing-point approximation. Kernels
compose as an algebra and round-trip through an s-expression grammar.
"""

__version__ = "0.1.0"

from .errors import (
    DimensionMismatchError,
    KernelParseError,
    MiniGpError,
    NonFiniteError,
    NonSquareError,
    NonSymmetricError,
    NotPositiveDefiniteError,
    OperatorNotSpdError,
    SingularTriangularError,
)
from .linalg import (
    LEDGER,
    AllocationLedger,
    CholeskyFactor,
    cholesky,
    fft_circulant_matvec,
    logdet_from_chol,
    matmul,
    pairwise_sqdist,
    tracked,
    trisolve,
)
from .kernels import (
    RBF,
    Kernel,
    Linear,
    Matern12,
    Matern32,
    Matern52,
    Periodic,
    Product,
    Scale,
    Sum,
    flatten_params,
    format_kernel,
    is_stationary,
    kernel_diag,
    kernel_eval,
    n_params,
    parse_kernel,
    slab_buffer_count,
    unflatten_params,
)
from .solvers import (
    CgConfig,
    CgResult,
    SkiState,
    build_ski,
    cg_solve,
    matrix_free_matvec,
    ski_matvec,
    slq_logdet,
)
from .models import (
    ExactState,
    OptimizerConfig,
    SparseState,
    default_ski_grid,
    farthest_point_sampling,
    flatten_model_params,
    gp_fit,
    gp_predict,
    log_marginal_likelihood,
    metrics,
    optimize_hyperparams,
    sparse_fit,
    sparse_predict,
    unflatten_model_params,
    vfe_objective,
)
from .bench import (
    BenchRecord,
    DatasetSpec,
    emit_table,
    generate_dataset,
    read_csv_dataset,
    run_suite,
    sample_gp_targets,
    write_csv_dataset,
)

__all__ = [
    "__version__",
    "MiniGpError",
    "DimensionMismatchError",
    "NonFiniteError",
    "NonSquareError",
    "NonSymmetricError",
    "NotPositiveDefiniteError",
    "SingularTriangularError",
    "OperatorNotSpdError",
    "KernelParseError",
    "AllocationLedger",
    "LEDGER",
    "tracked",
    "matmul",
    "CholeskyFactor",
    "cholesky",
    "trisolve",
    "pairwise_sqdist",
    "fft_circulant_matvec",
    "logdet_from_chol",
    "Kernel",
    "RBF",
    "Matern12",
    "Matern32",
    "Matern52",
    "Periodic",
    "Linear",
    "Scale",
    "Sum",
    "Product",
    "kernel_eval",
    "kernel_diag",
    "n_params",
    "flatten_params",
    "unflatten_params",
    "is_stationary",
    "slab_buffer_count",
    "parse_kernel",
    "format_kernel",
    "CgConfig",
    "CgResult",
    "matrix_free_matvec",
    "cg_solve",
    "slq_logdet",
    "SkiState",
    "build_ski",
    "ski_matvec",
    "ExactState",
    "SparseState",
    "OptimizerConfig",
    "default_ski_grid",
    "gp_fit",
    "gp_predict",
    "log_marginal_likelihood",
    "vfe_objective",
    "sparse_fit",
    "sparse_predict",
    "farthest_point_sampling",
    "optimize_hyperparams",
    "metrics",
    "flatten_model_params",
    "unflatten_model_params",
    "DatasetSpec",
    "generate_dataset",
    "sample_gp_targets",
    "read_csv_dataset",
    "write_csv_dataset",
    "BenchRecord",
    "run_suite",
    "emit_table",
]
