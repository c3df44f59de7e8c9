"""Distilled database test suites for judging predicted SQL by denotation."""

__version__ = "0.1.0"
