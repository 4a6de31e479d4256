"""Streaming dense point tracking: autodiff core, tracker, synthetic data, training and evaluation."""

__version__ = "0.1.0"
