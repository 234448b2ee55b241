"""Desk-scale hierarchical causal latent state world model."""

__version__ = "0.1.0"
