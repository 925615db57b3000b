from .exporter import (
    BLOCK_WIDTHS,
    ExportError,
    ExportManifest,
    LAYER_MAP,
    PREPROCESS_MEAN,
    PREPROCESS_STD,
    export_weights,
    probe_image,
)

__version__ = "0.1.0"
