"""Simulator services: LDA core, network, engine, evaluation and experiments."""
