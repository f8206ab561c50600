"""Grid-based multi-agent motion prediction on bird's-eye-view rasters."""

__version__ = "0.1.0"
