"""Two-stage flow-matching generation and training-free editing on a synthetic sound world."""

__version__ = "0.1.0"
