"""Semi-supervised vessel segmentation with vessel unveiling and domain-adversarial alignment."""

__version__ = "0.1.0"
