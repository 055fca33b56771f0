"""Convert multi-head attention into multi-head latent attention.

The toolkit targets encoder-decoder transformers with absolute positional
embeddings: it splits each key projection into preserved and compressible
frequency subspaces, factorises the compressible keys jointly with the values
through a truncated SVD, and runs the resulting latent-cache attention with
a small numpy transformer that can be fine-tuned after conversion.
"""

from .attention import AttentionConfig, attend, mha_attend, mla_attend, mla_attend_absorbed
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conversion import ConversionSpec, convert_layer, convert_model, joint_svd_factorize
from .errors import (
    ArgumentError,
    CacheStateError,
    CheckpointFormatError,
    ConfigurationError,
    MlaError,
    NumericalError,
    TrainingDivergedError,
)
from .estimators import MlaConverter, Seq2SeqEstimator
from .linalg import SvdFactors, truncated_svd
from .memory import footprint, reduction_ratio, sweep
from .model import ModelSpec, Seq2SeqModel
from .selection import NormStatistics, SubspaceSelection, select_2norm, select_uniform
from .training import SyntheticTask, TrainConfig, finetune, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "AttentionConfig",
    "CacheStateError",
    "Checkpoint",
    "CheckpointFormatError",
    "ConfigurationError",
    "ConversionSpec",
    "MlaConverter",
    "MlaError",
    "ModelSpec",
    "NormStatistics",
    "NumericalError",
    "Seq2SeqEstimator",
    "Seq2SeqModel",
    "SubspaceSelection",
    "SvdFactors",
    "SyntheticTask",
    "TrainConfig",
    "TrainingDivergedError",
    "attend",
    "convert_layer",
    "convert_model",
    "finetune",
    "finite_diff_check",
    "footprint",
    "joint_svd_factorize",
    "load_checkpoint",
    "mha_attend",
    "mla_attend",
    "mla_attend_absorbed",
    "reduction_ratio",
    "save_checkpoint",
    "select_2norm",
    "select_uniform",
    "sweep",
    "truncated_svd",
]
