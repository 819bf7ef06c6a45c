"""3D-reconstruction-guided face mask removal, desk scale."""

__version__ = "0.1.0"
