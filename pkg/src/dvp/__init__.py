"""Decoupled visual prompts with a probabilistic reweighting matrix.

A frozen encoder scores padded, prompted images against class descriptions.
Descriptions are split into partitions, each partition gets its own prompt,
and a count-based reweighting matrix turns description scores into class
logits. ``dvp.synth`` builds small tasks with a known generative model.
"""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .descriptions import (  # noqa: E402
    Description,
    DescriptionSet,
    Partitioning,
    kmeans,
    kmeans_partition,
    partition_by_cause,
    validate_partitioning,
)
from .encoder import EmbeddingTable, LinearEncoder, MLPEncoder, TableEncoder, make_encoder  # noqa: E402
from .errors import (  # noqa: E402
    CapabilityError,
    ConfigError,
    DataError,
    DivergenceError,
    DVPError,
    FormatError,
    UsageError,
)
from .kernels import BACKEND  # noqa: E402
from .reprogram import (  # noqa: E402
    PromptSet,
    ReweightingMatrix,
    VisualPrompt,
    estimate_prm,
    frame_mask,
    pad_image,
    similarity_matrix,
)
from .synth import SynthSpec, SynthTask, bayes_oracle_accuracy, generate_task, load_task, save_task  # noqa: E402
from .training import (  # noqa: E402
    Dataset,
    RiskReport,
    TrainConfig,
    empirical_risk,
    evaluate_accuracy,
    integrated_logits,
    partition_logits,
    train_dvp,
    train_standard_vr,
)

__all__ = [
    "BACKEND", "CapabilityError", "ConfigError", "DataError", "Dataset", "Description",
    "DescriptionSet", "DivergenceError", "DVPError", "EmbeddingTable", "FormatError",
    "LinearEncoder", "MLPEncoder", "Partitioning", "PromptSet", "ReweightingMatrix",
    "RiskReport", "SynthSpec", "SynthTask", "TableEncoder", "TrainConfig", "UsageError", "VisualPrompt", "__version__",
    "empirical_risk", "estimate_prm", "evaluate_accuracy", "frame_mask", "integrated_logits",
    "kmeans", "kmeans_partition", "make_encoder", "pad_image", "partition_by_cause",
    "partition_logits", "similarity_matrix", "train_dvp", "train_standard_vr",
    "validate_partitioning", "bayes_oracle_accuracy", "generate_task", "load_task", "save_task",
]
