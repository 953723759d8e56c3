"""Multi-level dependent attention network for hierarchical emotion classification."""

__version__ = "0.1.0"
