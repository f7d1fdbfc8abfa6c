"""Error detection and error-guided refinement for model-predicted SQL."""

__version__ = "0.1.0"
