"""Epidemiology-informed rumor detection on propagation trees."""

__version__ = "0.1.0"
