"""Multi-session next-item recommender with attention-pooled session encoders."""

__version__ = "0.1.0"
