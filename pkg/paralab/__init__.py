"""Numerical lab for semigroup paraproducts and Leibniz estimates on finite metric measure spaces."""

__version__ = "0.3.0"
