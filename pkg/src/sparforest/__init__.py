"""Random-forest confounder adjustment fused with Bayesian spatial Poisson models."""

__version__ = "0.1.0"
