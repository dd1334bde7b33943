"""Continual test-time adaptation of detector features with a low-rank adaptor."""
from .estimator import ContinualAdapter

__version__ = "0.1.0"
__all__ = ["ContinualAdapter"]
