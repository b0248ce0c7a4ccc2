"""Cross-modal 2D image to 3D point-cloud localization."""

__version__ = "0.1.0"
