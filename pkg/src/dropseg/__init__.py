"""Missing-sequence robust lesion segmentation with sequence-level input dropout."""

__version__ = "0.1.0"
