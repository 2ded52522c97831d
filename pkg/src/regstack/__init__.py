"""Serial-section histology to in vivo MR registration toolkit."""

__version__ = "0.1.0"
