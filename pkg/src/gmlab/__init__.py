"""Toy continuous-latent speech modelling lab: GMM priors, MDN heads and monotonic alignment."""

__version__ = "0.1.0"
