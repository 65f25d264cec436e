"""End-to-end memory networks with optional highway-style gated hops.

Modules, bottom up: ``tensor_core`` (primitives with hand-written backward
rules), ``corpus`` (bAbI QA and Dialog bAbI readers), ``encoder`` (bags,
position and temporal encoding), ``model`` (hops, tying, heads), ``trainer``,
``evaluator``, ``checkpoint`` and ``cli``. ``estimator`` wraps the stack in
scikit-learn style classes.
"""
from .checkpoint import Checkpoint
from .corpus import (
    CandidateSet,
    DialogExample,
    KnowledgeBaseIndex,
    QaExample,
    Vocabulary,
    parse_candidates,
    parse_dialog_task,
    parse_kb,
    parse_qa_task,
)
from .encoder import EncodingConfig
from .estimator import MemN2NClassifier, MemN2NResponseRanker
from .model import ModelParams, ModelVariant
from .tasks import load_task, parse_task_id
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "Checkpoint",
    "DialogExample",
    "EncodingConfig",
    "KnowledgeBaseIndex",
    "MemN2NClassifier",
    "MemN2NResponseRanker",
    "ModelParams",
    "ModelVariant",
    "QaExample",
    "TrainConfig",
    "Vocabulary",
    "load_task",
    "parse_candidates",
    "parse_dialog_task",
    "parse_kb",
    "parse_qa_task",
    "parse_task_id",
]
