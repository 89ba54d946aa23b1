"""Region-customized image restoration driven by plain-text instructions."""

__version__ = "0.1.0"
