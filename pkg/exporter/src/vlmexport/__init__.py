"""vlmexport: encoder/description exports in the segref ingest formats."""

from .backends import DESCRIBE_PROMPT, BackendError, HashProjBackend, make_backend
from .export import (
    ExportManifest,
    area_weights,
    export_descriptions,
    export_feature_maps,
    export_ingest,
    export_segment_embeddings,
    export_text_embeddings,
    pool_segment,
)

__version__ = "0.1.0"

__all__ = [
    "DESCRIBE_PROMPT",
    "BackendError",
    "HashProjBackend",
    "make_backend",
    "ExportManifest",
    "area_weights",
    "pool_segment",
    "export_descriptions",
    "export_feature_maps",
    "export_text_embeddings",
    "export_segment_embeddings",
    "export_ingest",
    "__version__",
]
