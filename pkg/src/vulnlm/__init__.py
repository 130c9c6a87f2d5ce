"""Hybrid SSM / linear-attention / MoE vulnerability detector, desk scale."""

__version__ = "0.1.0"
