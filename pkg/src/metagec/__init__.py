"""Meta-learned domain adaptation for grammatical error correction, on numpy."""

__version__ = "0.1.0"
