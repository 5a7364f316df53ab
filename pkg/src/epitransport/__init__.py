"""Epidemic forecasting with a learned diffusion-advection-reaction latent ODE."""

__version__ = "0.1.0"
