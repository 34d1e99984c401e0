"""DINOv2 patch-feature exporter for the DRFM file format."""

from .drfm import write_drfm
from .exporter import ExportJob, ExportResult, export_features, load_backbone

__version__ = "0.1.0"
