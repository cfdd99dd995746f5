"""Retrieval-augmented multi-agent reasoning-path search for cross-domain
misinformation detection."""

__version__ = "0.1.0"
