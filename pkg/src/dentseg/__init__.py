"""Tooth segmentation on panoramic dental radiographs with numpy encoder-decoder networks."""

__version__ = "0.1.0"
