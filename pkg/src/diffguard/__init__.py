"""Diffusion-based adversarial purification, PGD attacks, randomized-smoothing
certification and numerical checks of the robustness bounds, on tiny numpy
networks and synthetic data."""

__version__ = "0.1.0"
