"""Runtime multi-workflow provenance capture and integrated data view."""

__version__ = "0.1.0"
