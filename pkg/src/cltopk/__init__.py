"""Deterministic multi-worker simulator for shared-support (cyclic-leader
top-k) gradient compression with low-pass-filtered error feedback, with
closed-form contraction/convergence evaluators and an analytical
communication performance model.
"""

from .compress import (
    CompressorKind,
    ContractionEstimate,
    chunked_top_k_indices,
    expected_residual_oracle,
    hamming_distance,
    measure_contraction,
    random_k_indices,
    sparsify,
    top_k_indices,
)
from .core import (
    DimensionError,
    IndexSet,
    RngStream,
    SparseGradient,
    UndefinedMetricError,
    as_vector,
    cosine_distance,
    densify,
    mean_of,
)
from .feedback import ErrorFeedbackMemory, residual_input, update_memory
from .problems import (
    Logistic,
    MiniBatch,
    Problem,
    Quadratic,
    TinyMLP,
    estimate_constants,
    finite_difference_check,
    load_csv_dataset,
)
from .simulator import (
    ConfigError,
    DivergenceError,
    LayerPartition,
    LrSchedule,
    SimConfig,
    SupportMismatchError,
    TrainingTrace,
    WorkerState,
    leader_schedule,
    run,
    run_paired,
    sparse_allreduce_mean,
    step_baseline_sgd,
    step_scalecom,
    virtual_sequence_residual,
)

__version__ = "0.1.0"
