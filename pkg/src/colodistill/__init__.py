"""Weakly-supervised label distillation from colonoscopy records."""

__version__ = "0.1.0"
