"""Target-speaker speech-image retrieval on a small float64 autodiff core."""

__version__ = "0.1.0"
