"""Streaming recommendation with a frozen multimodal base, a small online
adapter, evidence-grounded soft prompts and product-quantized latents."""

from .config import LossWeights, ModelConfig
from .data import Catalog, DatasetBundle, SyntheticSpec, generate_synthetic, ingest, write_bundle
from .errors import (AlignRecError, ChecksumError, ConfigError, DanglingIdError, DimensionError,
                     DimMismatchError, NonFiniteError, NotTrainedError, TimestampOrderError, ValidationError,
                     VersionMismatchError, ZeroNormError)
from .evaluation import (EvalReport, SplitSpec, StreamRunner, evaluate, make_splits, measure_latency,
                         paired_ttest, run_stream)
from .metrics import hit_at_k, ndcg_at_k, recall_at_k
from .quantization import PQCode, PQCodebook, decode, encode, memory_ratio, train_codebook
from .system import Recommender
from .training import online_update, pretrain

__version__ = "0.1.0"

__all__ = [
    "AlignRecError", "Catalog", "ChecksumError", "ConfigError", "DanglingIdError", "DatasetBundle",
    "DimMismatchError", "DimensionError", "EvalReport", "LossWeights", "ModelConfig", "NonFiniteError",
    "NotTrainedError", "PQCode", "PQCodebook", "Recommender", "SplitSpec", "StreamRunner", "SyntheticSpec",
    "TimestampOrderError", "ValidationError", "VersionMismatchError", "ZeroNormError", "decode", "encode",
    "evaluate", "generate_synthetic", "hit_at_k", "ingest", "make_splits", "measure_latency", "memory_ratio",
    "ndcg_at_k", "online_update", "paired_ttest", "pretrain", "recall_at_k", "run_stream", "train_codebook",
    "write_bundle",
]
