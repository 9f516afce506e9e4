"""Task-aware speech enhancement: an enhancer front-end trained jointly with downstream audio models."""

__version__ = "0.1.0"
