"""Entity state tracking for procedural text and story plausibility reasoning."""

__version__ = "0.1.0"
