"""Likelihood ratio tests for row and column dependence in relational data matrices."""
__version__ = "0.1.0"
