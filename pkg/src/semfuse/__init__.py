"""Text-guided multimodal medical image fusion."""

__version__ = "0.1.0"
