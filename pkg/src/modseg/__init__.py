"""One-shot video object segmentation by network modulation."""

__version__ = "0.1.0"
