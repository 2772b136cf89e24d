"""Unpaired infrared-to-visible video translation with perceptual-cyclic and
contrastive similarity constraints."""

__version__ = "0.1.0"
