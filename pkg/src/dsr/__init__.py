"""Surface anomaly detection with a quantized latent space and dual decoders.

The package provides the latent codebooks and quantization ops, the five
sub-networks and their composition, feature-space anomaly synthesis, the
three-stage training pipeline, evaluation metrics, dataset ingestion,
checkpointing, and a CLI.
"""

__version__ = "0.1.0"

from .codebook import (
    Codebook,
    Quantized,
    codebook_usage,
    quantize,
    quantize_with_gradient,
    squared_distance_mean,
    vq_losses,
)
from .config import (
    ConfigError,
    ModelConfig,
    RunConfig,
    StageConfig,
    SynthesisConfig,
    load_config,
    profile_config,
    write_config,
)
from .networks import DsrModel, EncodedLatents, InferenceMaps, ObjectReconstruction, build_model
from .synthesis import (
    AnomalyInjection,
    SimilarityBound,
    inject_anomalies,
    perlin_field,
    perlin_mask,
    rank_neighbors,
    sample_replacement_index,
    simulate_smudge,
)
from .training import TrainLogRecord, TrainResult, focal_loss, train_stage1, train_stage2, train_stage3
from .evaluation import (
    EvalReport,
    MissingMaskError,
    auroc,
    average_precision,
    emit_overlays,
    evaluate_dataset,
    evaluate_with_injections,
    image_score,
    write_report,
)
from .data import DatasetError, DatasetManifest, ManifestEntry, load_dataset
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_model, save_checkpoint

__all__ = [
    "AnomalyInjection",
    "Checkpoint",
    "CheckpointError",
    "Codebook",
    "ConfigError",
    "DatasetError",
    "DatasetManifest",
    "DsrModel",
    "EncodedLatents",
    "EvalReport",
    "InferenceMaps",
    "ManifestEntry",
    "MissingMaskError",
    "ModelConfig",
    "ObjectReconstruction",
    "Quantized",
    "RunConfig",
    "SimilarityBound",
    "StageConfig",
    "SynthesisConfig",
    "TrainLogRecord",
    "TrainResult",
    "auroc",
    "average_precision",
    "build_model",
    "codebook_usage",
    "emit_overlays",
    "evaluate_dataset",
    "evaluate_with_injections",
    "focal_loss",
    "image_score",
    "inject_anomalies",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_model",
    "perlin_field",
    "perlin_mask",
    "profile_config",
    "quantize",
    "quantize_with_gradient",
    "rank_neighbors",
    "sample_replacement_index",
    "save_checkpoint",
    "simulate_smudge",
    "squared_distance_mean",
    "train_stage1",
    "train_stage2",
    "train_stage3",
    "vq_losses",
    "write_config",
    "write_report",
]
