"""Training and ablation harness for multi-frame video deblurring."""

__version__ = "0.1.0"
