"""Pretrained ID embeddings injected into a frozen transformer as gated per-layer prefixes."""

__version__ = "0.1.0"
