"""GPR place recognition with direction-encoding descriptors."""

__version__ = "0.1.0"
