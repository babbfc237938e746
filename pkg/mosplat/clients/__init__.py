from .prior_client import ExternalPrior, serve_prior

__all__ = ["ExternalPrior", "serve_prior"]
