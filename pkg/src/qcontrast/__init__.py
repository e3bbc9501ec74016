"""Quadratic 1-D residual networks trained with class-weighted contrastive learning."""

__version__ = "0.1.0"
