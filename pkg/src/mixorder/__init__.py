"""Tests for the number of components in multivariate normal mixtures."""

__version__ = "0.1.0"
