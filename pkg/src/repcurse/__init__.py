"""Induction heads, repetition loops and step-wise descaling on small attention-only transformers."""

from .numerics import RngStream, derive_stream, entropy, softmax
from .transformer import HeadId, HookSet, ModelConfig, ModelWeights, forward, generate

__version__ = "0.1.0"

__all__ = [
    "HeadId",
    "HookSet",
    "ModelConfig",
    "ModelWeights",
    "RngStream",
    "derive_stream",
    "entropy",
    "forward",
    "generate",
    "softmax",
]
