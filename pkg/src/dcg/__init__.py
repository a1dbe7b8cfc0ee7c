"""Incomplete multi-view clustering via per-view latent diffusion recovery,
contrastive alignment, attention fusion, and self-training refinement."""

from .cli import ExperimentConfig, run, sweep
from .data import (
    MissingnessSpec,
    MultiViewDataset,
    PairedIndexSet,
    apply_missingness,
    generate_synthetic,
    load_dataset,
    minibatches,
    paired_indices,
    save_dataset,
)
from .diffusion import (
    DiffusionSchedule,
    diffusion_loss,
    estimate_x0,
    forward_sample,
    make_schedule,
    recover_missing,
    reverse_step,
    sample_chain,
)
from .inference import ClusterResult, export_embeddings, export_labels, impute_and_cluster
from .metrics import (
    MetricReport,
    ari,
    clustering_accuracy,
    compactness,
    contingency_matrix,
    evaluate,
    nmi,
)
from .networks import (
    ModelParams,
    NetworkSpec,
    classify,
    decode,
    denoise,
    encode,
    fuse,
    init_params,
    time_embedding,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    category_contrastive,
    feature_contrastive,
    kl_self_training,
    mutual_info_loss,
    recon_loss,
    sharpen_targets,
    total_loss,
)
from .training import (
    TrainConfig,
    TrainReport,
    fit,
    load_checkpoint,
    make_optimizer,
    pretrain_autoencoders,
    restore_optimizer,
    save_checkpoint,
    train_full,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterResult",
    "DiffusionSchedule",
    "ExperimentConfig",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "MissingnessSpec",
    "ModelParams",
    "MultiViewDataset",
    "NetworkSpec",
    "PairedIndexSet",
    "TrainConfig",
    "TrainReport",
    "apply_missingness",
    "ari",
    "category_contrastive",
    "classify",
    "clustering_accuracy",
    "compactness",
    "contingency_matrix",
    "decode",
    "denoise",
    "diffusion_loss",
    "encode",
    "estimate_x0",
    "evaluate",
    "export_embeddings",
    "export_labels",
    "feature_contrastive",
    "fit",
    "forward_sample",
    "fuse",
    "generate_synthetic",
    "impute_and_cluster",
    "init_params",
    "kl_self_training",
    "load_checkpoint",
    "load_dataset",
    "make_optimizer",
    "make_schedule",
    "minibatches",
    "mutual_info_loss",
    "nmi",
    "paired_indices",
    "pretrain_autoencoders",
    "recon_loss",
    "recover_missing",
    "restore_optimizer",
    "reverse_step",
    "run",
    "sample_chain",
    "save_checkpoint",
    "save_dataset",
    "sharpen_targets",
    "time_embedding",
    "total_loss",
    "train_full",
]
