"""Semi-supervised review-net image captioning on a small numpy autodiff engine."""

__version__ = "0.1.0"
