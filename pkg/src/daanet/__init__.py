"""Domain-adversarial attention networks for cross-event short-text
classification, with token-level attention output."""

__version__ = "0.1.0"
