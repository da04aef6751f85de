"""Parametric continuous convolutions over dMRI q-space.

Continuous convolution layers whose kernel weights are sampled from a small
coordinate-conditioned MLP, assembled into a trainable network for angular
super-resolution of diffusion MRI signals, plus the synthetic phantom data
pipeline, spherical-harmonic baseline, and evaluation metrics.
"""

__version__ = "0.1.0"
