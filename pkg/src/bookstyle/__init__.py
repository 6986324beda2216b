"""Two-path expressive text-to-speech for long-form reading at desk scale."""

__version__ = "0.1.0"
