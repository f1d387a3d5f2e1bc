"""Sequential DPPs with learned segment lengths for supervised sequence summarization."""

__version__ = "0.1.0"
