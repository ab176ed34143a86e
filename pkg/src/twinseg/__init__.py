"""Grid-based instance segmentation with factorized column/row attention."""

__version__ = "0.1.0"
