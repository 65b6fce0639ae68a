"""Numerical laboratory for SRB-measure response of unimodal map families."""

__version__ = "0.1.0"
