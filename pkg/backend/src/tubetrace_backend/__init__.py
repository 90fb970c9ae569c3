"""Segmentation server speaking a line-delimited JSON protocol on stdio."""

__version__ = "0.1.0"
