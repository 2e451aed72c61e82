"""Layout-aware document encoder-decoder with text/vision fusion, blockwise
long-context encoding, calibration metrics and an analytical memory model."""

__version__ = "0.1.0"
