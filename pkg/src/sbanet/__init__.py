"""Referring-segmentation network with bidirectional vision-language alignment."""

__version__ = "0.1.0"
