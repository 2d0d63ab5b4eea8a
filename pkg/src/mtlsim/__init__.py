"""Gated multitask networks, learning-regimen experiments and a Bayesian meta-learner."""

__version__ = "0.1.0"
