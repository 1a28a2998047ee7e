"""Long-tail CTR ranking with semantic-ID clusters and head-to-tail transfer."""

__version__ = "0.1.0"
