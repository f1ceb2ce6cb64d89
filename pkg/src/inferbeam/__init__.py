"""Beam alignment for indoor mm-wave networks via cascaded grid CRFs."""

__version__ = "0.1.0"
