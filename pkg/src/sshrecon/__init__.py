"""Along-track sea surface height gridding, scoring and eddy detection at desk scale."""

__version__ = "0.1.0"
