"""Training-free activation sparsity on toy transformer blocks.

Thresholded magnitude sparsification with histogram calibration, per-matrix
greedy sparsity budgets, closed-form error laws with Monte Carlo checks,
and a column-skipping sparse GEMV with a latency/traffic benchmark.
"""

__version__ = "0.1.0"

from .tensor import (
    Layout,
    Matrix,
    RngStream,
    as_vector,
    load_matrix,
    matmul_dense,
    sample_gaussian,
    sample_laplace,
    save_matrix,
    to_layout,
)
from .sparsifier import (
    ActivationHistogram,
    DistFamily,
    DistributionFit,
    fit_distribution,
    load_histogram,
    realized_sparsity,
    save_histogram,
    sparsify,
    sparsify_batched,
)
from .theory import (
    MaskMode,
    expected_error_norm,
    gaussian_threshold,
    mc_relative_error,
    relative_error_magnitude,
    relative_error_random,
    scalar_error_variance,
)
from .model import (
    MATRIX_NAMES,
    MATRIX_TAP,
    BlockSparsityConfig,
    HiddenStateTap,
    TapPosition,
    TransformerBlock,
    TransformerModel,
    block_forward_dense,
    block_forward_sparse,
    calibrate_block,
    calibrate_model,
    gen_block,
    gen_model,
    intermediate_error_input_sparsity,
    intermediate_error_output_sparsity,
    load_model,
    mlp_forward_dense,
    mlp_forward_output_sparse,
    mlp_input,
    model_block_inputs,
    model_forward_dense,
    model_forward_sparse,
    resolve_config,
    save_model,
    tap_activations,
)
from .greedy import (
    GreedyStep,
    GreedyTrace,
    StepPolicy,
    block_relative_error,
    cost_estimate,
    greedy_optimize,
    load_configs,
    load_trace,
    save_configs,
    save_trace,
    select_config,
    select_step,
    uniform_config,
    validate_trace,
)
from .kernel import (
    BenchPoint,
    BenchResult,
    TrafficReport,
    bench_gemv,
    sparse_gemv,
    traffic_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
