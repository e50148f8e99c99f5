"""Poisoning attacks on embedded feature selection, with outlier-evasion penalties and detectors."""

__version__ = "0.1.0"
