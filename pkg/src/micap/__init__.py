"""Multiple-instance captioning pre-training, intrinsic-dimension estimation and transfer probing."""
__version__ = "0.1.0"
