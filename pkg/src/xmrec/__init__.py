"""Cross-modal semantic-ID learning and generative recommendation."""

__version__ = "0.1.0"
