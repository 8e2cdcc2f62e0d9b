"""Desk-scale lab for expert-specialized fine-tuning of mixture-of-experts transformers."""

__version__ = "0.1.0"
