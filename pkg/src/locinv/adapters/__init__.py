"""Model adapters. The toy backend is always available; Stable Diffusion needs diffusers."""
from .base import (AdapterSpec, AttentionLayer, AttentionSink, ConditioningEmbedding,
                   ModelAdapter, Tokenizer)
from .toy import ToyAdapter, ToyTokenizer

__all__ = ["AdapterSpec", "AttentionLayer", "AttentionSink", "ConditioningEmbedding",
           "ModelAdapter", "Tokenizer", "ToyAdapter", "ToyTokenizer"]
