"""Contrastive learning for situation retrieval on network telemetry."""

__version__ = "0.1.0"
