"""End-to-end neural diarization (EEND-EDA) conditioned on frame-level speaker embeddings."""

__version__ = "0.1.0"
