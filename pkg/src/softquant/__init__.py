"""Soft-confusion-matrix quantification and subspace domain adaptation."""

__version__ = "0.1.0"
