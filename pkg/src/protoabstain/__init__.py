"""Prototype-based classifiers that defer to a costly second modality only when needed."""

__version__ = "0.1.0"
