"""Classifier-Baseline and Meta-Baseline few-shot learning at desk scale."""

__version__ = "0.1.0"
