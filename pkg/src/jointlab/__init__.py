"""Semiparametric maximum likelihood for joint models of repeated measurements and survival."""

__version__ = "0.1.0"
