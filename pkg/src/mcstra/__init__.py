"""Cascaded multi-branch Swin transformer reconstruction of undersampled MRI."""

__version__ = "0.1.0"
