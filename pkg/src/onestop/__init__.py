"""Joint question generation and answer-span extraction with one encoder-decoder transformer."""

__version__ = "0.1.0"
