"""Retinal-image transformer laboratory.

A self-contained lab for binary classification of retinal images with a
small encoder-only transformer (convolutional patch embedding, rotary
position encoding, grouped-query attention, SwiGLU) plus the experimental
apparatus around it: training, nested cross-validation, Gaussian-process
Bayesian hyperparameter search, classification metrics with significance
and power analysis, Grad-CAM explainability, and a masking study that
quantifies how informative the Grad-CAM regions are.

Everything runs on a tiny reverse-mode autodiff tape over float64 numpy
arrays, so analytic gradients can be checked against finite differences
throughout.
"""

__version__ = "0.1.0"
