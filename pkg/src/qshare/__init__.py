"""Exam question sharing over a private single-writer chain."""

__version__ = "0.1.0"
