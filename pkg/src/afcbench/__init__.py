"""Benchmark question rewriting and evaluation with answer-free grounding context."""

__version__ = "0.1.0"
