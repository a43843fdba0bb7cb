"""Checkpoint exporter for the CFT1 weight container format."""

from .container import TargetConfig, write_container
from .errors import ExportError
from .export import ExportResult, export_checkpoint, synthesize_reuse
from .mapping import map_checkpoint
from .reference import reference_logits

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportResult",
    "TargetConfig",
    "export_checkpoint",
    "map_checkpoint",
    "reference_logits",
    "synthesize_reuse",
    "write_container",
    "__version__",
]
