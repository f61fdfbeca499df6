"""Prompt-based classification of picture-description transcripts with a micro language model."""

__version__ = "0.1.0"
