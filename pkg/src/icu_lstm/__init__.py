"""Two-stage ICU mortality and length-of-stay prediction with a numpy LSTM."""

__version__ = "0.1.0"
