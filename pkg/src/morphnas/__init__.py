"""Neural architecture search by network morphism and Bayesian optimization."""

from morphnas.graph import ArchGraph, default_cnn

__all__ = ["ArchGraph", "default_cnn"]
__version__ = "0.1.0"
