"""Prompt-CAM on a from-scratch numpy ViT: class-specific prompts whose attention maps show traits."""

__version__ = "0.1.0"
