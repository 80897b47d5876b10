"""Variational diffusion model likelihoods for out-of-distribution detection on feature vectors."""

__version__ = "0.1.0"
