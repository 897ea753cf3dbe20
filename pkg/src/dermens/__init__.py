"""Melanoma recognition ensemble: hand-coded and sparse-coded features over
whole-image and lesion-crop contexts, histogram-intersection SVMs with
calibrated score fusion, ensemble selection and evaluation metrics."""

__version__ = "0.1.0"
