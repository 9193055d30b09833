"""Siamese one-shot tracker trained with a pair loss, a hard-triplet loss and a learned combination layer."""

__version__ = "0.1.0"
