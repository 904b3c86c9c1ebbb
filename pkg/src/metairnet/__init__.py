"""Few-shot classification with generator-reinforced support sets."""

__version__ = "0.1.0"
