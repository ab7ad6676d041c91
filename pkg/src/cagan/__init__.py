"""Composition-aided GANs for paired face photo/sketch translation."""

__version__ = "0.1.0"
