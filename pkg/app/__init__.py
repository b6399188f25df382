"""Visual semantic token encoders with rank-based additive attention."""
__version__ = "0.1.0"
