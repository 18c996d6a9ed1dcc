"""Multi-fidelity physics-constrained latent-space forecasting for 2-D flows."""

__version__ = "0.1.0"
