"""Convert pretrained ViT checkpoints into the interchange weight format and
generate golden embedding fixtures for cross-runtime verification."""

__version__ = "0.1.0"

from .jobs import ExportJob, export_fixtures, export_weights, run_job
from .mapping import MappingError, dinov2_to_interchange, interchange_to_torch_model
from .torchvit import TorchViT

__all__ = [
    "ExportJob",
    "MappingError",
    "TorchViT",
    "dinov2_to_interchange",
    "export_fixtures",
    "export_weights",
    "interchange_to_torch_model",
    "run_job",
]
