"""Self-supervised unrolled MRI reconstruction with k-space calibration."""

__version__ = "0.1.0"
