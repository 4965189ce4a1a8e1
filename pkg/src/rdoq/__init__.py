"""Rate-distortion optimized post-training quantization of a small learned image codec."""

__version__ = "0.1.0"
