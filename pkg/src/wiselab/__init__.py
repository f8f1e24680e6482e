"""Weight-space ensembling lab: fine-tune, interpolate, and measure robustness."""

__version__ = "0.1.0"
