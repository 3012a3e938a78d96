"""Counterfactual explanations for sequence-to-structure predictors."""
from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
__version__ = "0.1.0"
