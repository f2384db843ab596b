"""Retrieval-augmented report generation over patch-embedding sets with a
sparsely-gated mixture-of-experts decoder, trained and evaluated end to end
on synthetic desk-scale corpora."""

from .config import ModelConfig, RunConfig, parse_config
from .corpus import Case, CorpusSpec, EmbeddingSet, generate_synthetic_corpus
from .errors import (
    ConfigurationError,
    DataFormatError,
    InputError,
    RagmoeError,
    TrainingDiverged,
)
from .memory import MemoryBank, build_memory_bank
from .metrics import MetricsReport, evaluate_corpus
from .model import ReportGenerator
from .train import TrainResult, train
from .vocab import ReportSequence, Vocabulary, build_vocab

__version__ = "0.1.0"

__all__ = [
    "Case",
    "ConfigurationError",
    "CorpusSpec",
    "DataFormatError",
    "EmbeddingSet",
    "InputError",
    "MemoryBank",
    "MetricsReport",
    "ModelConfig",
    "RagmoeError",
    "ReportGenerator",
    "ReportSequence",
    "RunConfig",
    "TrainResult",
    "TrainingDiverged",
    "Vocabulary",
    "build_memory_bank",
    "build_vocab",
    "evaluate_corpus",
    "generate_synthetic_corpus",
    "parse_config",
    "train",
]
