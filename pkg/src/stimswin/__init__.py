"""Language-assisted Video Swin Transformer for recognising stimming behaviours."""

__version__ = "0.1.0"
