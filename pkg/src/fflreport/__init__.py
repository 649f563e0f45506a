"""Fine finding label (FFL) extraction and retrieval-based report generation."""

__version__ = "0.1.0"
