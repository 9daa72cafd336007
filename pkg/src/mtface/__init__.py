"""Multi-task single-stage face detector trained on a synthetic world."""

__version__ = "0.1.0"
