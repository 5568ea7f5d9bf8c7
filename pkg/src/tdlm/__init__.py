"""Desk-scale laboratory for multi-teacher distillation, gloss-based word
sense disambiguation, and machine-paraphrase detection on a float64
autodiff/transformer core."""

from . import (
    autodiff,
    checkpoint,
    data,
    distill,
    metrics,
    ngram,
    paraphrase,
    tokenizer,
    transformer,
    wsd,
)
from .autodiff import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checkpoint",
    "data",
    "distill",
    "metrics",
    "ngram",
    "paraphrase",
    "tokenizer",
    "transformer",
    "wsd",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "__version__",
]
