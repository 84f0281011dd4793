"""Adversarial and attentive adversarial domain-invariant training on numpy."""

__version__ = "0.1.0"
