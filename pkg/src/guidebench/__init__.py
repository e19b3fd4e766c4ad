"""Guideline-grounded benchmark forge and LLM evaluation harness."""

__version__ = "0.1.0"
