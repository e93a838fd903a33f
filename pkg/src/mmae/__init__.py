"""Multi-scale masked autoencoder for multi-lead waveform anomaly detection.

The package is organized around five pieces: a small reverse-mode autodiff
core (`autodiff`), signal segmentation and synthetic data (`data`), the
dual-stream encoder/decoder model (`model`), training and scoring (`train`),
and gradient verification (`gradcheck`). `config`, `plot`, `ablation`, and
`cli` wrap those in a command-line workflow.
"""

from .autodiff import (
    AttentionParams,
    Tensor,
    backward,
    finite_difference_check,
    max_relative_error,
    multi_head_self_attention,
)
from .config import CliConfig, DataConfig, InferConfig, load_config, save_config, synth_record
from .data import (
    ANOMALY_KINDS,
    EcgRecord,
    ManifestEntry,
    SegmentGrid,
    SynthConfig,
    inject_anomaly,
    load_manifest_records,
    load_record,
    normalize_segment,
    read_manifest,
    save_record,
    segment_record,
    synth_normal,
    write_manifest,
)
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    FormatError,
    MetricError,
    MmaeError,
    ShapeError,
    ValidationError,
)
from .model import (
    MaskPlan,
    ModelConfig,
    ModelParams,
    count_parameters,
    decode,
    encode,
    estimate_flops,
    forward_pass,
    inference_flops,
    load_checkpoint,
    full_scale_config,
    sample_mask_plan,
    save_checkpoint,
)
from .train import (
    AdamW,
    AnomalyReport,
    TrainConfig,
    anomaly_score,
    auroc,
    evaluate_manifest,
    fit,
    lr_schedule,
    score_records,
)

__version__ = "0.1.0"

__all__ = [
    "ANOMALY_KINDS",
    "AdamW",
    "AnomalyReport",
    "AttentionParams",
    "CliConfig",
    "ConfigError",
    "ContractError",
    "CorruptionError",
    "DataConfig",
    "EcgRecord",
    "FormatError",
    "InferConfig",
    "ManifestEntry",
    "MaskPlan",
    "MetricError",
    "MmaeError",
    "ModelConfig",
    "ModelParams",
    "SegmentGrid",
    "ShapeError",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "anomaly_score",
    "auroc",
    "backward",
    "count_parameters",
    "decode",
    "encode",
    "estimate_flops",
    "evaluate_manifest",
    "finite_difference_check",
    "fit",
    "forward_pass",
    "inference_flops",
    "inject_anomaly",
    "load_checkpoint",
    "load_config",
    "load_manifest_records",
    "load_record",
    "lr_schedule",
    "max_relative_error",
    "multi_head_self_attention",
    "normalize_segment",
    "full_scale_config",
    "read_manifest",
    "sample_mask_plan",
    "save_checkpoint",
    "save_config",
    "score_records",
    "segment_record",
    "synth_normal",
    "synth_record",
    "write_manifest",
]
