"""Worst-case load-shed verification of neural switching policies on SOC/AC grid models."""

__version__ = "0.1.0"
