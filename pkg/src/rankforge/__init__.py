"""Two-ranker multi-teacher distillation for neural re-ranking."""

__version__ = "0.1.0"
