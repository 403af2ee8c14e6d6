"""Intent-aware unified world-action model, desk scale."""

__version__ = "0.1.0"
