"""Image-folder to VAPS-FEAT exporter."""

__version__ = "0.1.0"

from .exporter import ExportError, ExportManifest, export

__all__ = ["ExportError", "ExportManifest", "export", "__version__"]
