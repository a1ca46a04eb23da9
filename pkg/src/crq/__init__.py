"""Cluster-regularized ternary quantization.

A small numpy toolkit that compresses network weights to three values
{-alpha, 0, +alpha} per layer: a constrained three-center clustering
solver, a regularized retraining loop that pulls weights toward their
cluster centers while the task loss still steers, and a quantize /
straight-through fine-tune pipeline with 2-bit weight storage, plus the
direct-quantization baseline and error metrics to compare against.
"""

from .cluster import (
    CENTERS,
    ClusterSolution,
    SolverConfig,
    assign_codes,
    brute_force_solve,
    cluster_objective,
    solve,
    update_alpha,
)
from .container import (
    Checkpoint,
    export_dequantized,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
)
from .datasets import (
    DataSplit,
    as_batches,
    build_split,
    load_csv,
    load_idx,
    make_blobs,
    make_spirals,
    train_val_split,
)
from .errors import (
    ConfigError,
    CorruptModelError,
    DataError,
    DimensionError,
    StaleStateError,
)
from .experiment import (
    ComparisonResult,
    ExperimentConfig,
    build_network,
    emit_report,
    ingest_dataset,
    run,
    run_comparison,
    run_stage,
)
from .metrics import (
    ErrorReport,
    direct_quantize,
    error_report,
    evaluate,
    output_mse,
    weight_mse,
)
from .nn import (
    Batch,
    Conv2d,
    Dense,
    Flatten,
    Network,
    Relu,
    mean_loss_accuracy,
    network_from_spec,
)
from .numeric import as_dense, make_rng, matmul, reduce_mean_abs, stage_rng
from .quantize import (
    QuantizedLayer,
    QuantizedModel,
    ShadowState,
    compression_ratio,
    finetune,
    pack_codes,
    quantize,
    unpack_codes,
)
from .train import (
    EpochLog,
    RegularizerState,
    TrainConfig,
    crq_step,
    objective_gradients,
    regularizer_value,
    retrain,
    solve_state,
    total_objective,
)

__version__ = "0.1.0"
