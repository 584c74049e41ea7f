"""Surface defect detection with grid-graph Fourier features."""

__version__ = "0.1.0"
