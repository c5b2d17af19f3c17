"""Repository-level context extraction for LLM program repair experiments."""

__version__ = "0.1.0"
