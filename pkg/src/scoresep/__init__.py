"""Score-informed music source separation: baseline, score-informed and score-only mask models."""

__version__ = "0.1.0"
