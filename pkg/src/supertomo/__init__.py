"""Superiorized incremental maximum-likelihood reconstruction for 2-D tomography."""

__version__ = "0.1.0"
