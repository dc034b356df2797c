"""Learned token-importance prediction for decode-time KV sparsity, at toy scale."""

__version__ = "0.1.0"
