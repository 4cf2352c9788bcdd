"""Cross-layer cache aggregation for token-reduced vision transformers."""

__version__ = "0.1.0"
