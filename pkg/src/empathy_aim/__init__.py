"""Attention-based influence model for conversation-level therapist empathy estimation."""

__version__ = "0.1.0"

from .data import Conversation, Corpus, Speaker, Turn, parse_corpus, zscore_normalize
from .evaluation import CvPlan, CvReport, SweepTable, cross_validate, kfold_split, sweep
from .model import ForwardTrace, ModelConfig, Variant, forward_conversation, predict
from .nn import ModelParams, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .training import TrainConfig, TrainHistory, accuracy, train

__all__ = [
    "Conversation", "Corpus", "Speaker", "Turn", "parse_corpus", "zscore_normalize",
    "CvPlan", "CvReport", "SweepTable", "cross_validate", "kfold_split", "sweep",
    "ForwardTrace", "ModelConfig", "Variant", "forward_conversation", "predict",
    "ModelParams", "load_checkpoint", "save_checkpoint", "SynthConfig", "generate",
    "TrainConfig", "TrainHistory", "accuracy", "train",
]
