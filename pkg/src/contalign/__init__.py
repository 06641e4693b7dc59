"""Continual segmentation benchmark with per-task alignment adapters,
VAE-based task routing with OOD fallback, and a suite of continual-learning
baselines, all on a synthetic multi-domain benchmark."""

__version__ = "0.1.0"
