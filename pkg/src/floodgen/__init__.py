"""Physics-conditioned generation and evaluation of post-flood satellite imagery."""

__version__ = "0.1.0"

from .raster import (
    FLOOD_BROWN,
    FloodMask,
    HazardRaster,
    RasterTile,
    binarize_hazard,
    iou,
    load_mask,
    load_tile,
    overlay_flood,
    resample_mask,
    save_mask,
    save_tile,
)

__all__ = [
    "__version__",
    "FLOOD_BROWN",
    "FloodMask",
    "HazardRaster",
    "RasterTile",
    "binarize_hazard",
    "iou",
    "load_mask",
    "load_tile",
    "overlay_flood",
    "resample_mask",
    "save_mask",
    "save_tile",
]
