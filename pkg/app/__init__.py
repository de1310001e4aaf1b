"""Decentralized LDA simulator: gossip-averaged Gibbs online EM over agent graphs."""

__all__ = ["create_app"]

from .main import create_app  # noqa: E402
