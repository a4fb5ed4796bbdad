"""Early-fusion, sub-field crop yield prediction toolkit."""

__version__ = "0.1.0"
