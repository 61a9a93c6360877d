"""awexport: run a pretrained speech encoder and write AWF feature files."""

__version__ = "0.1.0"
