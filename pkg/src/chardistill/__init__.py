"""Self-supervised character-to-character distillation on text images."""

__version__ = "0.1.0"
