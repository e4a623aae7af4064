"""Lexical-stress CNN classifiers on spectrograms and their relevance analysis."""

__version__ = "0.1.0"
