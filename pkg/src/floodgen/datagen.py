"""Synthetic scene generation, augmentation, and dataset assembly.

The synthetic corpus is a desk-scale stand-in for large proprietary
pre/post-flood tile collections: procedural terrain with rectangular
structures, a connected flood region, and a post image where flooded
pixels become textured water. Real tiles can be dropped into the same
directory layout (`dataset/{train,val,test}/<id>/pre.png, post.png,
mask.png, meta.json`).

Everything here is a pure function of (inputs, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .raster import FLOOD_BROWN, FloodMask, RasterTile, load_mask, load_tile, save_mask, save_tile

#: Terrain palette anchors: height in [0, 1] -> RGB. Chosen to keep a wide
#: color margin to the water base so water is separable by hue alone.
TERRAIN_ANCHORS = (
    (0.0, (58, 92, 48)),
    (0.35, (88, 124, 62)),
    (0.7, (118, 136, 72)),
    (1.0, (116, 98, 60)),
)

STRUCTURE_COLORS = ((170, 170, 174), (94, 96, 102), (206, 200, 190), (72, 62, 58))

#: Structures with height above this stay dry even inside the flood mask.
FLOOD_HEIGHT_THRESHOLD = 0.5

WATER_NOISE_AMPLITUDE = 8


@dataclass(frozen=True)
class TileRecord:
    """One (pre, post, mask) sample plus identification metadata."""

    pre: RasterTile
    post: RasterTile
    mask: FloodMask
    event: str
    id: str
    seed: int | None = None

    def __post_init__(self):
        shapes = {
            (self.pre.height, self.pre.width),
            (self.post.height, self.post.width),
            self.mask.shape,
        }
        if len(shapes) != 1:
            raise InvalidInputError(f"pre/post/mask shapes differ: {shapes}")
        if self.pre.channels != 3 or self.post.channels != 3:
            raise InvalidInputError("pre and post must be 3-channel")


@dataclass(frozen=True)
class ElasticParams:
    alpha: float = 34.0
    sigma: float = 4.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidInputError("elastic alpha must be >= 0")
        if not self.sigma > 0:
            raise InvalidInputError("elastic sigma must be > 0")


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation switches and magnitudes.

    Rotations are restricted to multiples of 90 degrees so masks survive
    without interpolation artifacts. Photometric jitter (hue, contrast)
    touches imagery only, never the mask.
    """

    rotate: bool = True
    random_crop: tuple[int, int] | None = None
    hue_jitter: float = 0.05
    contrast_jitter: float = 0.25
    elastic: ElasticParams | None = None

    def __post_init__(self):
        if not 0 <= self.hue_jitter <= 0.5:
            raise InvalidInputError("hue_jitter must lie in [0, 0.5]")
        if self.contrast_jitter < 0:
            raise InvalidInputError("contrast_jitter must be >= 0")
        if self.random_crop is not None:
            ch, cw = self.random_crop
            if ch < 1 or cw < 1:
                raise InvalidInputError("crop size must be positive")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotate=False, random_crop=None, hue_jitter=0.0, contrast_jitter=0.0, elastic=None)


@dataclass(frozen=True)
class AugmentParams:
    """One concrete sample of transforms, shared across pre/post/mask."""

    rot90: int = 0
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width
    displacement: tuple[np.ndarray, np.ndarray] | None = None  # (dy, dx)
    hue_offset: float = 0.0
    contrast_factor: float = 1.0


def _multi_octave_noise(rng: np.random.Generator, shape: tuple[int, int], octaves=(4, 8, 16, 32)) -> np.ndarray:
    """Smooth value noise in [0, 1]: bilinearly upsampled random grids."""
    h, w = shape
    out = np.zeros((h, w), dtype=np.float32)
    amp = 1.0
    total = 0.0
    for cells in octaves:
        grid = rng.random((cells + 1, cells + 1), dtype=np.float32)
        layer = cv2.resize(grid, (w, h), interpolation=cv2.INTER_LINEAR)
        out += amp * layer
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _terrain_colors(height: np.ndarray) -> np.ndarray:
    xs = np.array([a for a, _ in TERRAIN_ANCHORS])
    out = np.empty(height.shape + (3,), dtype=np.float32)
    for c in range(3):
        ys = np.array([rgb[c] for _, rgb in TERRAIN_ANCHORS], dtype=np.float32)
        out[..., c] = np.interp(height, xs, ys)
    return out


def _largest_component(binary: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=np.int8))
    if n == 0:
        return np.zeros_like(binary, dtype=np.uint8)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return (labels == counts.argmax()).astype(np.uint8)


def _connected_water_mask(
    rng: np.random.Generator, shape: tuple[int, int], fraction: float, tol: float = 0.05
) -> np.ndarray | None:
    """Largest connected component of a thresholded smooth noise field,
    with area fraction within `tol` of the target. None if this field
    cannot hit the target."""
    fld = _multi_octave_noise(rng, shape, octaves=(3, 6, 12))
    lo, hi = 0.0, 1.0
    for _ in range(40):
        t = (lo + hi) / 2
        comp = _largest_component(fld <= t)
        frac = comp.mean()
        if abs(frac - fraction) <= tol and comp.any():
            return comp
        if frac < fraction:
            lo = t
        else:
            hi = t
    return None


def synthesize_scene(
    seed: int,
    size: tuple[int, int] = (128, 128),
    water_fraction: float = 0.3,
    resolution_m_per_px: float = 0.5,
) -> TileRecord:
    """Generate one deterministic synthetic (pre, post, mask) sample.

    The pre image is multi-octave-noise terrain with rectangular
    structures; the mask is a single connected flood region whose area
    fraction lands within 0.1 of `water_fraction`; the post image equals
    pre with masked pixels replaced by textured water, except structures
    taller than the flood height, which stay dry.
    """
    h, w = size
    if h < 64 or w < 64:
        raise InvalidInputError("scene size must be at least 64x64")
    if not 0 <= water_fraction <= 1:
        raise InvalidInputError("water_fraction must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    height = _multi_octave_noise(rng, (h, w))
    terrain = _terrain_colors(height)
    grain = rng.integers(-6, 7, (h, w, 3))
    pre_px = np.clip(terrain + grain, 0, 255).astype(np.uint8)

    # rectangular structures with a per-pixel height channel
    structure_height = np.zeros((h, w), dtype=np.float32)
    n_structures = int(rng.integers(4, 10)) + (h * w) // 4096
    for _ in range(n_structures):
        sh = int(rng.integers(4, max(6, h // 10)))
        sw = int(rng.integers(4, max(6, w // 10)))
        top = int(rng.integers(0, h - sh))
        left = int(rng.integers(0, w - sw))
        color = STRUCTURE_COLORS[int(rng.integers(0, len(STRUCTURE_COLORS)))]
        tall = float(rng.random())
        pre_px[top : top + sh, left : left + sw] = color
        pre_px[top, left : left + sw] = np.maximum(np.asarray(color, int) - 40, 0).astype(np.uint8)
        pre_px[top : top + sh, left] = np.maximum(np.asarray(color, int) - 40, 0).astype(np.uint8)
        structure_height[top : top + sh, left : left + sw] = tall

    if water_fraction == 0:
        mask = np.zeros((h, w), dtype=np.uint8)
        post_px = pre_px.copy()
    else:
        mask = None
        for _ in range(100):
            mask = _connected_water_mask(rng, (h, w), water_fraction)
            if mask is not None:
                break
        if mask is None:
            raise InvalidInputError(
                f"could not realize a connected flood region of fraction {water_fraction}"
            )
        water = np.clip(
            np.asarray(FLOOD_BROWN, dtype=np.int16)
            + rng.integers(-WATER_NOISE_AMPLITUDE, WATER_NOISE_AMPLITUDE + 1, (h, w, 3)),
            0,
            255,
        ).astype(np.uint8)
        wet = mask.astype(bool) & (structure_height <= FLOOD_HEIGHT_THRESHOLD)
        post_px = pre_px.copy()
        post_px[wet] = water[wet]

    geo = (resolution_m_per_px, 0.0, 0.0, 0.0, -resolution_m_per_px, 0.0)
    common = dict(geo=geo, crs="local", resolution_m_per_px=resolution_m_per_px)
    return TileRecord(
        pre=RasterTile(pre_px, **common),
        post=RasterTile(post_px, **common),
        mask=FloodMask(mask, resolution_m_per_px=resolution_m_per_px),
        event="synthetic",
        id=f"scene-{seed:08d}",
        seed=seed,
    )


def _elastic_field(
    rng: np.random.Generator, shape: tuple[int, int], alpha: float, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    dy = alpha * ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma)
    dx = alpha * ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma)
    return dy, dx


def _displace(px: np.ndarray, dy: np.ndarray, dx: np.ndarray, order: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(px.shape[0]), np.arange(px.shape[1]), indexing="ij")
    coords = [rows + dy, cols + dx]
    if px.ndim == 2:
        out = ndimage.map_coordinates(px.astype(np.float32), coords, order=order, mode="reflect")
    else:
        out = np.stack(
            [
                ndimage.map_coordinates(px[..., c].astype(np.float32), coords, order=order, mode="reflect")
                for c in range(px.shape[2])
            ],
            axis=-1,
        )
    if px.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(px.dtype)


def elastic_transform(image: RasterTile, alpha: float, sigma: float, seed: int) -> RasterTile:
    """Warp by a Gaussian-smoothed random displacement field.

    The field is `alpha * gaussian_smooth(uniform(-1, 1), sigma)` per axis
    and the output is sampled at x + d with bilinear interpolation.
    """
    ElasticParams(alpha, sigma)  # validate
    rng = np.random.default_rng(seed)
    dy, dx = _elastic_field(rng, (image.height, image.width), alpha, sigma)
    return image.with_pixels(_displace(image.pixels, dy, dx, order=1))


def _shift_hue(px: np.ndarray, offset: float) -> np.ndarray:
    hsv = cv2.cvtColor(px.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + offset * 360.0, 360.0)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def _adjust_contrast(px: np.ndarray, factor: float) -> np.ndarray:
    x = px.astype(np.float32) / 255.0
    x = (x - 0.5) * factor + 0.5
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def sample_augment_params(cfg: AugmentConfig, seed: int, shape: tuple[int, int]) -> AugmentParams:
    """Draw one transform sample; the same draw is applied to pre, post, and mask."""
    rng = np.random.default_rng(seed)
    h, w = shape
    rot = int(rng.integers(0, 4)) if cfg.rotate else 0
    if rot % 2 == 1:
        h, w = w, h

    crop = None
    if cfg.random_crop is not None:
        ch, cw = cfg.random_crop
        if ch > h or cw > w:
            raise InvalidInputError(f"crop {cfg.random_crop} exceeds (possibly rotated) tile {h}x{w}")
        crop = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
        h, w = ch, cw

    displacement = None
    if cfg.elastic is not None and cfg.elastic.alpha > 0:
        displacement = _elastic_field(rng, (h, w), cfg.elastic.alpha, cfg.elastic.sigma)

    hue = float(rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)) if cfg.hue_jitter > 0 else 0.0
    if cfg.contrast_jitter > 0:
        span = math.log(1.0 + cfg.contrast_jitter)
        contrast = float(np.exp(rng.uniform(-span, span)))
    else:
        contrast = 1.0
    return AugmentParams(rot90=rot, crop=crop, displacement=displacement, hue_offset=hue, contrast_factor=contrast)


def apply_geometric(px: np.ndarray, params: AugmentParams, nearest: bool = False) -> np.ndarray:
    """Apply the geometric part of one augmentation sample to an array."""
    out = np.rot90(px, params.rot90, axes=(0, 1)) if params.rot90 else px
    if params.crop is not None:
        top, left, ch, cw = params.crop
        out = out[top : top + ch, left : left + cw]
    if params.displacement is not None:
        dy, dx = params.displacement
        out = _displace(np.ascontiguousarray(out), dy, dx, order=0 if nearest else 1)
    return np.ascontiguousarray(out)


def apply_augment(rec: TileRecord, params: AugmentParams) -> TileRecord:
    pre = apply_geometric(rec.pre.pixels, params)
    post = apply_geometric(rec.post.pixels, params)
    mask = apply_geometric(rec.mask.mask, params, nearest=True)
    if params.hue_offset != 0.0:
        pre = _shift_hue(pre, params.hue_offset)
        post = _shift_hue(post, params.hue_offset)
    if params.contrast_factor != 1.0:
        pre = _adjust_contrast(pre, params.contrast_factor)
        post = _adjust_contrast(post, params.contrast_factor)
    return TileRecord(
        pre=rec.pre.with_pixels(pre),
        post=rec.post.with_pixels(post),
        mask=FloodMask(mask, resolution_m_per_px=rec.mask.resolution_m_per_px),
        event=rec.event,
        id=rec.id,
        seed=rec.seed,
    )


def augment(rec: TileRecord, cfg: AugmentConfig, seed: int) -> TileRecord:
    """One augmentation draw: geometric transforms shared by pre/post/mask,
    photometric jitter shared by pre/post only. The mask stays binary."""
    return apply_augment(rec, sample_augment_params(cfg, seed, (rec.pre.height, rec.pre.width)))


def _event_rng(seed: int, event: str) -> np.random.Generator:
    digest = hashlib.sha256(event.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def split_dataset(
    records: list[TileRecord], ratios: tuple[float, float, float], seed: int
) -> tuple[list[TileRecord], list[TileRecord], list[TileRecord]]:
    """Disjoint, exhaustive (train, val, test) partition, stratified by event.

    Per stratum, val and test sizes round down and the remainder goes to
    train. Deterministic in `seed`.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise InvalidInputError("ratios must be non-negative")
    if not records:
        raise InvalidInputError("no records to split")

    by_event: dict[str, list[TileRecord]] = {}
    for rec in records:
        by_event.setdefault(rec.event, []).append(rec)
    if len(records) < len(by_event):
        raise InvalidInputError("fewer records than strata")

    train: list[TileRecord] = []
    val: list[TileRecord] = []
    test: list[TileRecord] = []
    for event in sorted(by_event):
        group = sorted(by_event[event], key=lambda r: r.id)
        perm = _event_rng(seed, event).permutation(len(group))
        n = len(group)
        n_val = int(n * ratios[1])
        n_test = int(n * ratios[2])
        n_train = n - n_val - n_test
        shuffled = [group[i] for i in perm]
        train += shuffled[:n_train]
        val += shuffled[n_train : n_train + n_val]
        test += shuffled[n_train + n_val :]
    return train, val, test


def write_records(records: list[TileRecord], split_dir: str | Path) -> None:
    """Write records under `split_dir/<id>/{pre,post,mask}.png + meta.json`."""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    seen = set()
    for rec in records:
        if rec.id in seen:
            raise InvalidInputError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        d = split_dir / rec.id
        d.mkdir(parents=True, exist_ok=True)
        save_tile(rec.pre, d / "pre.png")
        save_tile(rec.post, d / "post.png")
        save_mask(rec.mask, d / "mask.png")
        (d / "meta.json").write_text(
            json.dumps({"event": rec.event, "id": rec.id, "seed": rec.seed}, indent=2)
        )


def read_records(split_dir: str | Path) -> list[TileRecord]:
    """Load all records from one split directory, sorted by id."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no such dataset split: {split_dir}")
    records = []
    for d in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        meta = json.loads((d / "meta.json").read_text())
        records.append(
            TileRecord(
                pre=load_tile(d / "pre.png"),
                post=load_tile(d / "post.png"),
                mask=load_mask(d / "mask.png"),
                event=meta["event"],
                id=meta["id"],
                seed=meta.get("seed"),
            )
        )
    return records


def write_dataset(splits: dict[str, list[TileRecord]], root: str | Path) -> None:
    for name, records in splits.items():
        write_records(records, Path(root) / name)
