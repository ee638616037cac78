"""LLM-assisted sequential recommendation."""
