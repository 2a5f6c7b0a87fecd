"""Core raster types, mask algebra, and lossless tile I/O.

A tile is an H x W x C pixel array plus lightweight geographic metadata
(affine transform, CRS string, resolution). Pixel data is stored as PNG;
metadata lives in a JSON sidecar next to the image, so no heavyweight
geo stack is needed. All values are immutable after construction and the
operations here are pure functions, safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError

log = logging.getLogger(__name__)

#: Hand-picked flood-water overlay color (#998d6f).
FLOOD_BROWN = (0x99, 0x8D, 0x6F)

#: Affine transform mapping (col, row) -> (x, y) as
#: x = a*col + b*row + c, y = d*col + e*row + f.
IDENTITY_GEO = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

_PIL_MODES = {1: "L", 3: "RGB", 4: "RGBA"}


@dataclass(frozen=True)
class RasterTile:
    """H x W x C image with geographic transform metadata.

    Samples are uint8 in [0, 255] at rest; compute paths may carry floats
    in [-1, 1] (which covers the unit interval). The tile takes ownership
    of `pixels` and marks it read-only.
    """

    pixels: np.ndarray
    geo: tuple[float, ...] = IDENTITY_GEO
    crs: str = "local"
    resolution_m_per_px: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3, 4):
            raise InvalidInputError(f"expected HxWxC with C in {{1,3,4}}, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError("empty raster")
        if px.dtype == np.uint8:
            pass
        elif np.issubdtype(px.dtype, np.floating):
            if px.min() < -1.0 - 1e-6 or px.max() > 1.0 + 1e-6:
                raise InvalidInputError("float samples must lie within [-1, 1]")
        else:
            raise InvalidInputError(f"unsupported sample dtype {px.dtype}")
        if len(self.geo) != 6:
            raise InvalidInputError("geo transform needs 6 coefficients")
        if not self.resolution_m_per_px > 0:
            raise InvalidInputError("resolution_m_per_px must be positive")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "geo", tuple(float(g) for g in self.geo))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray) -> "RasterTile":
        """Same metadata, new pixel array."""
        return replace(self, pixels=pixels)


@dataclass(frozen=True)
class HazardRaster:
    """Storm-surge output: per-pixel flood height (0 means dry)."""

    surge: np.ndarray
    resolution_m_per_px: float = 30.0

    def __post_init__(self):
        s = np.asarray(self.surge, dtype=np.float64)
        if s.ndim != 2 or s.size == 0:
            raise InvalidInputError("surge raster must be non-empty HxW")
        if s.min() < 0:
            raise InvalidInputError("surge values must be non-negative")
        if not self.resolution_m_per_px > 0:
            raise InvalidInputError("resolution_m_per_px must be positive")
        s.flags.writeable = False
        object.__setattr__(self, "surge", s)


@dataclass(frozen=True)
class FloodMask:
    """Binary H x W raster: 1 = flooded, 0 = dry."""

    mask: np.ndarray
    resolution_m_per_px: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or m.size == 0:
            raise InvalidInputError("mask must be non-empty HxW")
        if not np.isin(m, (0, 1)).all():
            raise InvalidInputError("mask values must be exactly 0 or 1")
        if not self.resolution_m_per_px > 0:
            raise InvalidInputError("resolution_m_per_px must be positive")
        m = m.astype(np.uint8, copy=not m.flags.owndata if m.dtype == np.uint8 else True)
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())


def binarize_hazard(hazard: HazardRaster, threshold: float = 0.0) -> FloodMask:
    """Reduce a height-differentiated surge raster to flooded / non-flooded.

    A pixel is flooded iff its surge value is strictly above `threshold`
    (default 0: any positive surge counts as flooded).
    """
    if threshold < 0:
        raise InvalidInputError("threshold must be non-negative")
    return FloodMask(
        (hazard.surge > threshold).astype(np.uint8),
        resolution_m_per_px=hazard.resolution_m_per_px,
    )


def resample_mask(mask: FloodMask, target_resolution_m_per_px: float, method: str = "nearest") -> FloodMask:
    """Resample a binary mask onto a grid of different resolution.

    The output grid covers the same geographic extent. `nearest` samples
    each output cell at its footprint's top-left source pixel and handles
    any scale ratio; `majority` votes over the footprint (ties go to 1).
    Output is always binary.
    """
    if not target_resolution_m_per_px > 0:
        raise InvalidInputError("target resolution must be positive")
    scale = target_resolution_m_per_px / mask.resolution_m_per_px
    h, w = mask.shape
    out_h = max(1, int(round(h / scale)))
    out_w = max(1, int(round(w / scale)))

    if method == "nearest":
        rows = np.minimum(np.floor(np.arange(out_h) * scale).astype(np.int64), h - 1)
        cols = np.minimum(np.floor(np.arange(out_w) * scale).astype(np.int64), w - 1)
        out = mask.mask[np.ix_(rows, cols)]
    elif method == "majority":
        r_edges = _footprint_edges(out_h, scale, h)
        c_edges = _footprint_edges(out_w, scale, w)
        integral = np.zeros((h + 1, w + 1), dtype=np.int64)
        integral[1:, 1:] = mask.mask.cumsum(0).cumsum(1)
        r0, r1 = r_edges[:-1][:, None], r_edges[1:][:, None]
        c0, c1 = c_edges[:-1][None, :], c_edges[1:][None, :]
        ones = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
        area = (r1 - r0) * (c1 - c0)
        out = (2 * ones >= area).astype(np.uint8)
    else:
        raise InvalidInputError(f"unknown resampling method {method!r}")
    return FloodMask(out, resolution_m_per_px=target_resolution_m_per_px)


def _footprint_edges(n_out: int, scale: float, limit: int) -> np.ndarray:
    edges = np.floor(np.arange(n_out + 1) * scale).astype(np.int64)
    edges = np.clip(edges, 0, limit)
    edges[-1] = limit
    # guarantee non-empty footprints even under rounding
    for i in range(1, n_out + 1):
        if edges[i] <= edges[i - 1]:
            edges[i] = min(edges[i - 1] + 1, limit)
    edges[-1] = limit
    return edges


def iou(a: FloodMask, b: FloodMask) -> float:
    """Intersection over union of two same-shape binary masks.

    Two all-zero masks agree perfectly that nothing is flooded, so the
    degenerate 0/0 case returns 1.
    """
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    am = a.mask.astype(bool)
    bm = b.mask.astype(bool)
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def overlay_flood(pre: RasterTile, mask: FloodMask, color: tuple[int, int, int] = FLOOD_BROWN) -> RasterTile:
    """Handcrafted baseline: paint flooded pixels as an opaque flat color.

    Pixels where mask = 1 become exactly `color`; all other pixels are
    bit-identical to `pre`. The mask must already live on `pre`'s grid.
    """
    if pre.channels != 3:
        raise InvalidInputError("overlay requires a 3-channel tile")
    if pre.pixels.dtype != np.uint8:
        raise InvalidInputError("overlay requires integer samples")
    if mask.shape != (pre.height, pre.width):
        raise InvalidInputError(f"mask shape {mask.shape} does not match tile {(pre.height, pre.width)}")
    out = pre.pixels.copy()
    out[mask.mask.astype(bool)] = np.asarray(color, dtype=np.uint8)
    return pre.with_pixels(out)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_tile(tile: RasterTile, path: str | Path) -> None:
    """Write a tile as `<name>.png` plus a `<name>.json` metadata sidecar."""
    if tile.pixels.dtype != np.uint8:
        raise InvalidInputError("only uint8 tiles are saved; quantize compute-path floats first")
    path = Path(path)
    px = tile.pixels[:, :, 0] if tile.channels == 1 else tile.pixels
    Image.fromarray(px, mode=_PIL_MODES[tile.channels]).save(path, format="PNG")
    sidecar = {
        "geo": list(tile.geo),
        "crs": tile.crs,
        "resolution_m_per_px": tile.resolution_m_per_px,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))


def load_tile(path: str | Path) -> RasterTile:
    """Load a `<name>.png` + sidecar pair written by :func:`save_tile`.

    A missing sidecar is tolerated: the tile gets an identity geo
    transform and the condition is logged and recorded in `tile.meta`.
    """
    path = Path(path)
    img = Image.open(path)
    px = np.asarray(img)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.shape[2] not in (1, 3, 4):
        raise InvalidInputError(f"unsupported channel count {px.shape[2]} in {path}")
    meta: dict = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        info = json.loads(sidecar.read_text())
        geo = tuple(info["geo"])
        crs = info["crs"]
        res = float(info["resolution_m_per_px"])
    else:
        log.warning("no geo sidecar for %s; assuming identity transform", path)
        meta["warning"] = "missing geo sidecar; identity transform assumed"
        geo, crs, res = IDENTITY_GEO, "unknown", 1.0
    return RasterTile(px, geo=geo, crs=crs, resolution_m_per_px=res, meta=meta)


def save_mask(mask: FloodMask, path: str | Path) -> None:
    """Write a mask as a single-channel PNG with values {0, 255} + sidecar."""
    path = Path(path)
    Image.fromarray(mask.mask * np.uint8(255), mode="L").save(path, format="PNG")
    _sidecar_path(path).write_text(
        json.dumps({"resolution_m_per_px": mask.resolution_m_per_px}, indent=2)
    )


def load_mask(path: str | Path) -> FloodMask:
    """Load a mask PNG written by :func:`save_mask`, decoding {0, 255} to {0, 1}."""
    path = Path(path)
    raw = np.asarray(Image.open(path).convert("L"))
    if not np.isin(raw, (0, 255)).all():
        raise InvalidInputError(f"{path} is not a binary {{0,255}} mask")
    res = 1.0
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        res = float(json.loads(sidecar.read_text())["resolution_m_per_px"])
    return FloodMask((raw > 0).astype(np.uint8), resolution_m_per_px=res)


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [0, 1]."""
    return pixels.astype(np.float32) / 255.0


def to_signed(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def quantize_unit(pixels: np.ndarray) -> np.ndarray:
    """float [0, 1] -> uint8 [0, 255] with round-half-away behavior of rint."""
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_signed(pixels: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255]."""
    return np.rint((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
