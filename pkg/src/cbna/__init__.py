"""Continual batch-normalization adaptation on a toy segmentation engine."""

__version__ = "0.1.0"
