"""Prompt-aware ranking scheduler toolkit for LLM serving simulations."""

__version__ = "0.1.0"
