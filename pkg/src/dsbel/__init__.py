"""DSBEL: boosted split-transform-merge CNN features with an SVM/MLP/AdaBoost vote."""

from ._runtime import tune_allocator

tune_allocator()

__version__ = "0.1.0"
