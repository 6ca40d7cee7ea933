"""Dilated fully-convolutional semantic texture segmentation toolkit."""

__version__ = "0.1.0"
