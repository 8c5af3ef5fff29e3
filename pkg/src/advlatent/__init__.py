"""Adversarial robustness of split (mobile/edge) neural-network inference."""

__version__ = "0.1.0"
