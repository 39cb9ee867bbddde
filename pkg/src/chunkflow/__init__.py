"""Chunk-wise autoregressive flow-matching generation with asymmetric distillation, at toy scale."""

__version__ = "0.1.0"
