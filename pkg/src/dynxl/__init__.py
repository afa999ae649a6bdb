"""Dynamic evaluation for a from-scratch Transformer-XL style language model."""

__version__ = "0.1.0"
