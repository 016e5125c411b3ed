"""Bridge from pretrained CLIP checkpoints to the eco-prompts file formats."""

from .export import (
    ArchitectureError,
    ExportJob,
    export_embeddings,
    export_text_tower,
    tokenize_classes,
)
from .formats import write_bank, write_manifest

__version__ = "0.1.0"

__all__ = [
    "ArchitectureError",
    "ExportJob",
    "export_embeddings",
    "export_text_tower",
    "tokenize_classes",
    "write_bank",
    "write_manifest",
]
