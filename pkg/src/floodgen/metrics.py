"""Perceptual distance, the combined plausibility score, and the
model-comparison harness.

The combined score is the harmonic mean of physical consistency (mask
IoU) and photorealism (1 - perceptual distance), with a small epsilon
guarding the division. Perceptual distance follows the learned
perceptual image patch similarity recipe: channel-unit-normalized
convolutional features, per-layer non-negative linear calibration,
squared differences averaged over space and summed over layers.

The calibrated extractor weights are an external asset produced by
`scripts/fetch_perceptual_weights.py`; a seeded random extractor is
provided for offline, desk-scale relative comparisons.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError, MissingAssetError
from .raster import FloodMask, RasterTile, iou, load_mask, load_tile, to_signed

REPORT_SCHEMA = "fvps-report/1"

#: Input standardization applied to [-1, 1] images before the backbone.
INPUT_SHIFT = (-0.030, -0.088, -0.188)
INPUT_SCALE = (0.458, 0.448, 0.450)

#: AlexNet-family backbone: (in, out, kernel, stride, padding, pool_before)
_BACKBONE = (
    (3, 64, 11, 4, 2, False),
    (64, 192, 5, 1, 2, True),
    (192, 384, 3, 1, 1, True),
    (384, 256, 3, 1, 1, False),
    (256, 256, 3, 1, 1, False),
)

DEFAULT_ASSET = Path(os.environ.get("FLOODGEN_ASSETS", Path.home() / ".cache" / "floodgen")) / "perceptual_alex.npz"


class PerceptualExtractor(nn.Module):
    """Convolutional feature extractor plus per-layer calibration weights.

    Inference-only: parameters are frozen at construction. `kind` records
    provenance ('pretrained' asset or 'random' seeded initialization).
    """

    def __init__(self, kind: str = "uncalibrated"):
        super().__init__()
        self.kind = kind
        self.convs = nn.ModuleList(
            [nn.Conv2d(i, o, k, stride=s, padding=p) for i, o, k, s, p, _ in _BACKBONE]
        )
        self.lins = nn.ModuleList(
            [nn.Conv2d(o, 1, 1, bias=False) for _, o, _, _, _, _ in _BACKBONE]
        )
        shift = torch.tensor(INPUT_SHIFT).view(1, 3, 1, 1)
        scale = torch.tensor(INPUT_SCALE).view(1, 3, 1, 1)
        self.register_buffer("shift", shift)
        self.register_buffer("scale", scale)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def n_layers(self) -> int:
        return len(self.convs)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer post-ReLU activations for a [-1, 1] image batch."""
        x = (x - self.shift) / self.scale
        taps = []
        for conv, (_, _, _, _, _, pool) in zip(self.convs, _BACKBONE):
            if pool:
                x = F.max_pool2d(x, kernel_size=3, stride=2)
            x = F.relu(conv(x))
            taps.append(x)
        return taps

    @classmethod
    def random(cls, seed: int = 0) -> "PerceptualExtractor":
        """Deterministic random-weights extractor for offline smoke use.

        Random convolutional features still induce a usable pseudo-metric
        (zero on identical inputs, symmetric, non-negative); absolute
        values are not comparable to the calibrated asset.
        """
        ext = cls(kind="random")
        g = torch.Generator().manual_seed(seed)
        for conv in ext.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            conv.bias.zero_()
        for lin, (_, o, _, _, _, _) in zip(ext.lins, _BACKBONE):
            lin.weight.fill_(1.0 / o)
        return ext

    @classmethod
    def from_asset(cls, path: str | Path) -> "PerceptualExtractor":
        """Load backbone + calibration weights from an `.npz` asset."""
        path = Path(path)
        if not path.exists():
            raise MissingAssetError(
                f"perceptual weights asset not found at {path}; "
                "run scripts/fetch_perceptual_weights.py (needs network) or "
                "set FLOODGEN_ASSETS to a directory containing it"
            )
        data = np.load(path)
        ext = cls(kind="pretrained")
        for i, conv in enumerate(ext.convs):
            conv.weight.copy_(torch.from_numpy(data[f"conv{i}_weight"]))
            conv.bias.copy_(torch.from_numpy(data[f"conv{i}_bias"]))
        for i, lin in enumerate(ext.lins):
            w = torch.from_numpy(data[f"lin{i}"]).view(1, -1, 1, 1)
            lin.weight.copy_(w.clamp_min(0.0))
        return ext

    @classmethod
    def pretrained(cls) -> "PerceptualExtractor":
        return cls.from_asset(DEFAULT_ASSET)


def _normalize_channels(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((x * x).sum(dim=1, keepdim=True))
    return x / (norm + eps)


def _tile_to_batch(tile: RasterTile) -> torch.Tensor:
    if tile.channels != 3:
        raise InvalidInputError("perceptual distance expects 3-channel tiles")
    px = tile.pixels
    arr = to_signed(px) if px.dtype == np.uint8 else px.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def lpips(a: RasterTile, b: RasterTile, extractor: PerceptualExtractor) -> float:
    """Perceptual distance: 0 for identical inputs, larger is less similar.

    Per layer, channel-unit-normalize both feature maps, square their
    difference, weight by the calibration kernel, average over space, and
    sum across layers. Symmetric in (a, b).
    """
    if a.pixels.shape != b.pixels.shape:
        raise InvalidInputError(f"shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    with torch.no_grad():
        fa = extractor.features(_tile_to_batch(a))
        fb = extractor.features(_tile_to_batch(b))
        total = 0.0
        for xa, xb, lin in zip(fa, fb, extractor.lins):
            diff = (_normalize_channels(xa) - _normalize_channels(xb)) ** 2
            total += lin(diff).mean(dim=(2, 3)).sum().item()
    return float(total)


def perceptual_loss(
    a: torch.Tensor, b: torch.Tensor, extractor: PerceptualExtractor
) -> torch.Tensor:
    """Differentiable batch variant of the distance, for use as a loss."""
    fa = extractor.features(a)
    fb = extractor.features(b)
    total = torch.zeros((), dtype=a.dtype)
    for xa, xb, lin in zip(fa, fb, extractor.lins):
        diff = (_normalize_channels(xa) - _normalize_channels(xb)) ** 2
        total = total + lin(diff).mean(dim=(2, 3)).sum(dim=1).mean()
    return total


@dataclass(frozen=True)
class MetricsConfig:
    epsilon: float = 1e-6
    lpips_clamp: bool = True
    aggregation: str = "per_image_mean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if self.aggregation != "per_image_mean":
            raise InvalidInputError(f"unknown aggregation {self.aggregation!r}")


def fvps(iou_value: float, lpips_value: float, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Harmonic mean of IoU and (1 - perceptual distance), epsilon-guarded.

    0 when either submetric is 0; 1 when IoU = 1 and distance = 0.
    """
    if not 0.0 <= iou_value <= 1.0:
        raise InvalidInputError(f"iou must lie in [0, 1], got {iou_value}")
    if lpips_value < 0:
        raise InvalidInputError("perceptual distance must be non-negative")
    if cfg.lpips_clamp:
        lpips_value = min(lpips_value, 1.0)
    eps = cfg.epsilon
    return 2.0 / (1.0 / (iou_value + eps) + 1.0 / (1.0 - lpips_value + eps))


@dataclass(frozen=True)
class ImageMetrics:
    id: str
    iou: float
    lpips: float
    fvps: float


@dataclass(frozen=True)
class ConditionMetrics:
    rows: tuple[ImageMetrics, ...]
    mean_iou: float
    mean_lpips: float
    mean_fvps: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-image and aggregate results for one model under each mask condition."""

    model: str
    segmenter_id: str
    epsilon: float
    conditions: dict[str, ConditionMetrics] = field(default_factory=dict)

    def validate(self) -> None:
        """Stored fvps values must be recomputable from stored (iou, lpips)."""
        cfg = MetricsConfig(epsilon=self.epsilon)
        for cond in self.conditions.values():
            for row in cond.rows:
                if fvps(row.iou, row.lpips, cfg) != row.fvps:
                    raise InvalidInputError(f"inconsistent fvps row for id {row.id!r}")

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "model": self.model,
            "segmenter_id": self.segmenter_id,
            "epsilon": self.epsilon,
            "conditions": {
                name: {
                    "per_image": [
                        {"id": r.id, "iou": r.iou, "lpips": r.lpips, "fvps": r.fvps}
                        for r in cond.rows
                    ],
                    "mean_iou": cond.mean_iou,
                    "mean_lpips": cond.mean_lpips,
                    "mean_fvps": cond.mean_fvps,
                }
                for name, cond in self.conditions.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        if data.get("schema") != REPORT_SCHEMA:
            raise InvalidInputError(f"unsupported report schema {data.get('schema')!r}")
        conditions = {
            name: ConditionMetrics(
                rows=tuple(
                    ImageMetrics(r["id"], r["iou"], r["lpips"], r["fvps"])
                    for r in cond["per_image"]
                ),
                mean_iou=cond["mean_iou"],
                mean_lpips=cond["mean_lpips"],
                mean_fvps=cond["mean_fvps"],
            )
            for name, cond in data["conditions"].items()
        }
        return cls(
            model=data["model"],
            segmenter_id=data["segmenter_id"],
            epsilon=data["epsilon"],
            conditions=conditions,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _resolve_image(root: Path, tile_id: str, leaf: str) -> Path:
    flat = root / f"{tile_id}.png"
    nested = root / tile_id / f"{leaf}.png"
    if flat.exists():
        return flat
    if nested.exists():
        return nested
    raise InvalidInputError(f"no image for id {tile_id!r} under {root}")


def _ids_in(root: Path) -> set[str]:
    ids = {p.stem for p in root.glob("*.png")}
    ids |= {p.name for p in root.iterdir() if p.is_dir() and (p / "post.png").exists()}
    return ids


def _center_crop_pair(a: RasterTile, b: RasterTile) -> tuple[RasterTile, RasterTile]:
    if a.pixels.shape == b.pixels.shape:
        return a, b
    dh = abs(a.height - b.height)
    dw = abs(a.width - b.width)
    if dh > 2 or dw > 2:
        raise InvalidInputError(
            f"image sizes differ by more than alignment slack: {a.pixels.shape} vs {b.pixels.shape}"
        )
    h = min(a.height, b.height)
    w = min(a.width, b.width)

    def crop(t: RasterTile) -> RasterTile:
        top = (t.height - h) // 2
        left = (t.width - w) // 2
        return t.with_pixels(t.pixels[top : top + h, left : left + w])

    return crop(a), crop(b)


def evaluate_model(
    generated_dir: str | Path,
    truth_dir: str | Path,
    masks_dir: str | Path,
    segment_fn,
    extractor: PerceptualExtractor,
    cfg: MetricsConfig = MetricsConfig(),
    model_name: str = "model",
    segmenter_id: str = "unknown",
) -> MetricsReport:
    """Score one model's generated images against ground truth.

    `generated_dir` holds either `high_res/` and `low_res/` condition
    subdirectories of `<id>.png` files, or flat `<id>.png` files (treated
    as the high-resolution-mask condition). Truth and mask directories may
    be flat (`<id>.png`) or dataset-split shaped (`<id>/post.png`,
    `<id>/mask.png`). Per image: IoU of the segmented generated and
    segmented truth images, perceptual distance between them, and the
    combined score; aggregates are per-image means.

    `segment_fn(tile, tile_id) -> FloodMask` decouples the harness from
    any particular segmentation model.
    """
    generated_dir = Path(generated_dir)
    truth_dir = Path(truth_dir)
    masks_dir = Path(masks_dir)
    condition_dirs = {
        name: generated_dir / name
        for name in ("high_res", "low_res")
        if (generated_dir / name).is_dir()
    }
    if not condition_dirs:
        if not any(generated_dir.glob("*.png")):
            raise InvalidInputError(f"no generated images found under {generated_dir}")
        condition_dirs = {"high_res": generated_dir}

    truth_ids = _ids_in(truth_dir)
    conditions = {}
    for name, cdir in sorted(condition_dirs.items()):
        gen_ids = {p.stem for p in cdir.glob("*.png")}
        if gen_ids != truth_ids:
            raise InvalidInputError(
                f"id mismatch in condition {name!r}: generated {sorted(gen_ids)[:4]}..., "
                f"truth {sorted(truth_ids)[:4]}..."
            )
        rows = []
        for tile_id in sorted(gen_ids):
            _resolve_image(masks_dir, tile_id, "mask")  # masks must cover every id
            gen = load_tile(_resolve_image(cdir, tile_id, "generated"))
            truth = load_tile(_resolve_image(truth_dir, tile_id, "post"))
            gen, truth = _center_crop_pair(gen, truth)
            iou_val = iou(segment_fn(gen, tile_id), segment_fn(truth, tile_id))
            lpips_val = lpips(gen, truth, extractor)
            rows.append(
                ImageMetrics(tile_id, iou_val, lpips_val, fvps(iou_val, lpips_val, cfg))
            )
        conditions[name] = ConditionMetrics(
            rows=tuple(rows),
            mean_iou=float(np.mean([r.iou for r in rows])),
            mean_lpips=float(np.mean([r.lpips for r in rows])),
            mean_fvps=float(np.mean([r.fvps for r in rows])),
        )
    return MetricsReport(
        model=model_name, segmenter_id=segmenter_id, epsilon=cfg.epsilon, conditions=conditions
    )


_COLUMNS = (
    ("lpips", "high_res", min),
    ("lpips", "low_res", min),
    ("iou", "high_res", max),
    ("iou", "low_res", max),
    ("fvps", "high_res", max),
    ("fvps", "low_res", max),
)


def compare_models(reports: list[MetricsReport]) -> tuple[str, str]:
    """Aggregate comparison across models: aligned text table plus CSV.

    One row per model; six columns (perceptual distance / IoU / combined
    score, each under the native and degraded mask condition). The best
    value per column is flagged with '*' in the text rendering (lower is
    better for the distance, higher for the rest).
    """
    if not reports:
        raise InvalidInputError("no reports to compare")
    ref_conditions = set(reports[0].conditions)
    ref_ids = {
        name: tuple(r.id for r in cond.rows) for name, cond in reports[0].conditions.items()
    }
    for rep in reports[1:]:
        if set(rep.conditions) != ref_conditions:
            raise InvalidInputError(f"report {rep.model!r} has different conditions")
        for name, cond in rep.conditions.items():
            if tuple(r.id for r in cond.rows) != ref_ids[name]:
                raise InvalidInputError(f"report {rep.model!r} covers a different test set")

    columns = [(m, c, pick) for m, c, pick in _COLUMNS if c in ref_conditions]

    def cell(rep: MetricsReport, metric: str, condition: str) -> float:
        return getattr(rep.conditions[condition], f"mean_{metric}")

    best = {
        (m, c): pick(cell(rep, m, c) for rep in reports) for m, c, pick in columns
    }

    header = ["model"] + [f"{m}_{c}" for m, c, _ in columns]
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf)
    writer.writerow(header)
    for rep in reports:
        writer.writerow([rep.model] + [f"{cell(rep, m, c):.6f}" for m, c, _ in columns])
    csv_text = csv_buf.getvalue()

    name_w = max(len("model"), max(len(r.model) for r in reports))
    col_w = max(len(h) for h in header[1:]) + 2
    lines = ["model".ljust(name_w) + "".join(h.rjust(col_w) for h in header[1:])]
    for rep in reports:
        cells = []
        for m, c, _ in columns:
            v = cell(rep, m, c)
            mark = "*" if v == best[(m, c)] else " "
            cells.append(f"{v:.4f}{mark}".rjust(col_w))
        lines.append(rep.model.ljust(name_w) + "".join(cells))
    return "\n".join(lines) + "\n", csv_text


def identity_mask_oracle(masks_dir: str | Path):
    """Segmenter stand-in that returns the stored conditioning mask for an id.

    Replaces a trained segmenter in plumbing tests: with it, generated and
    truth images of the same id segment to the same mask by construction.
    """
    masks_dir = Path(masks_dir)

    def segment(tile: RasterTile, tile_id: str) -> FloodMask:
        mask = load_mask(_resolve_image(masks_dir, tile_id, "mask"))
        if mask.shape != (tile.height, tile.width):
            raise InvalidInputError(
                f"stored mask for {tile_id!r} has shape {mask.shape}, tile is "
                f"{(tile.height, tile.width)}"
            )
        return mask

    return segment
