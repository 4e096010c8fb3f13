"""Video-to-speech generation via speech decomposition and rectified flow."""

__version__ = "0.1.0"
