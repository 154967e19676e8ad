"""
ABMT (Asymmetric Branched Mean Teaching)
A desk-scale toolkit for unsupervised domain-adaptive representation learning
with an EMA mean teacher, asymmetric encoder branches and clustering-based
pseudo labels.
"""

from .tensor import (
    Tensor,
    backward,
    no_grad,
    is_grad_enabled,
    linear,
    relu,
    log_softmax,
    pool,
    concat,
    l2_normalize,
    pairwise_distance,
    finite_diff_check,
)
from .optim import Adam, AdamState, adam_step, default_milestones, step_decay_lr
from .config import (
    EncoderConfig,
    LossWeights,
    ClusterConfig,
    SynthConfig,
    TrainConfig,
    load_config,
    apply_overrides,
)
from .encoder import (
    EncoderState,
    EncoderOutput,
    FrozenOutput,
    build_encoder,
    forward,
    signature,
    init_dynamic_classifiers,
    encode_dataset,
    count_parameters,
)
from .checkpoint import save_checkpoint, load_checkpoint
from .losses import (
    cross_entropy,
    batch_hard_triplet,
    soft_cross_entropy,
    softmax_triplet_T,
    soft_triplet,
    source_objective,
    target_terms,
    target_objective,
)
from .mean_teacher import (
    TeacherState,
    DivergenceTrace,
    init_teacher,
    ema_update,
    feature_divergence,
    record_divergence,
)
from .data import Dataset, synth_dataset, read_dataset, write_dataset, sample_pk_batch, part_erasing
from .pseudo_labels import (
    DistanceMatrix,
    PseudoLabeling,
    pairwise_euclidean,
    k_reciprocal_rerank,
    dbscan,
    kmeans_pp,
    cluster_means,
    generate_pseudo_labels,
    write_labeling_csv,
)
from .evaluation import (
    RetrievalSplit,
    RetrievalMetrics,
    rank_gallery,
    mean_average_precision,
    cmc,
    evaluate,
    random_ranking_map,
)
from .trainer import (
    EpochRecord,
    MetricsReport,
    pretrain_source,
    adapt_target,
    run_eval,
    write_run_artifacts,
)
from .diagnostics import diagnose
from .logging_config import (
    setup_abmt_logging,
    enable_debug_logging,
    enable_info_logging,
    enable_quiet_logging,
    set_abmt_log_level,
    disable_abmt_logging,
    enable_abmt_logging,
)
from .exceptions import (
    ABMTError,
    DimensionError,
    ContractError,
    ParameterError,
    StateError,
    NumericalError,
    DegenerateClusteringError,
    BatchError,
    EvaluationError,
)

__version__ = "0.1.0"

__all__ = [
    # Tensor core
    "Tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "linear",
    "relu",
    "log_softmax",
    "pool",
    "concat",
    "l2_normalize",
    "pairwise_distance",
    "finite_diff_check",
    "Adam",
    "AdamState",
    "adam_step",
    "default_milestones",
    "step_decay_lr",
    # Configuration
    "EncoderConfig",
    "LossWeights",
    "ClusterConfig",
    "SynthConfig",
    "TrainConfig",
    "load_config",
    "apply_overrides",
    # Encoder
    "EncoderState",
    "EncoderOutput",
    "FrozenOutput",
    "build_encoder",
    "forward",
    "signature",
    "init_dynamic_classifiers",
    "encode_dataset",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    # Losses
    "cross_entropy",
    "batch_hard_triplet",
    "soft_cross_entropy",
    "softmax_triplet_T",
    "soft_triplet",
    "source_objective",
    "target_terms",
    "target_objective",
    # Mean teacher
    "TeacherState",
    "DivergenceTrace",
    "init_teacher",
    "ema_update",
    "feature_divergence",
    "record_divergence",
    # Data
    "Dataset",
    "synth_dataset",
    "read_dataset",
    "write_dataset",
    "sample_pk_batch",
    "part_erasing",
    # Pseudo labels
    "DistanceMatrix",
    "PseudoLabeling",
    "pairwise_euclidean",
    "k_reciprocal_rerank",
    "dbscan",
    "kmeans_pp",
    "cluster_means",
    "generate_pseudo_labels",
    "write_labeling_csv",
    # Evaluation
    "RetrievalSplit",
    "RetrievalMetrics",
    "rank_gallery",
    "mean_average_precision",
    "cmc",
    "evaluate",
    "random_ranking_map",
    # Training pipeline
    "EpochRecord",
    "MetricsReport",
    "pretrain_source",
    "adapt_target",
    "run_eval",
    "write_run_artifacts",
    "diagnose",
    # Logging configuration
    "setup_abmt_logging",
    "enable_debug_logging",
    "enable_info_logging",
    "enable_quiet_logging",
    "set_abmt_log_level",
    "disable_abmt_logging",
    "enable_abmt_logging",
    # Exceptions
    "ABMTError",
    "DimensionError",
    "ContractError",
    "ParameterError",
    "StateError",
    "NumericalError",
    "DegenerateClusteringError",
    "BatchError",
    "EvaluationError",
]
