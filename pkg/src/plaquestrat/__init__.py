"""Interpretable ensemble CNN toolkit for imbalanced plaque stratification."""
__version__ = "0.1.0"
