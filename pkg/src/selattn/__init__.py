"""Selective hierarchical attention for context-aware sequence translation, in numpy."""

from .config import ModelConfig, TrainConfig
from .corpus import DocumentPair, Vocab
from .model import ContextCache, DocBatch, Model
from .sparsemax import sparsemax, sparsemax_np
from .tensor import Tensor

__all__ = ["ContextCache", "DocBatch", "DocumentPair", "Model", "ModelConfig", "Tensor",
           "TrainConfig", "Vocab", "sparsemax", "sparsemax_np"]
