"""Flood-water segmentation: RGB tile in, binary mask out.

A plain encoder-decoder U-Net with skip connections trained on L1, soft
IoU, and a small adversarial term (patch discriminator over image-mask
stacks), followed by an L1-only finetune phase that touches just the last
decoder block and the output convolution. This model is the oracle behind
the IoU half of the combined plausibility score.

`color_oracle_segmenter` is a training-free stand-in for synthetic
scenes whose water color is known.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError
from .raster import FLOOD_BROWN, FloodMask, RasterTile, to_signed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmenterConfig:
    depth: int = 4
    base_width: int = 32
    lambda_l1: float = 1.0
    lambda_iou: float = 1.0
    lambda_adv: float = 0.1
    epochs: int = 20
    finetune_epochs: int = 5
    batch_size: int = 8
    lr: float = 2e-4
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_l1, self.lambda_iou, self.lambda_adv) < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("threshold must lie in (0, 1)")
        if self.depth < 1 or self.base_width < 1:
            raise InvalidInputError("depth and base_width must be positive")


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * 2**i for i in range(config.depth + 1)]

        self.inc = _double_conv(3, widths[0])
        self.downs = nn.ModuleList(
            [_double_conv(widths[i], widths[i + 1]) for i in range(config.depth)]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(config.depth)]
        )
        self.dec_blocks = nn.ModuleList(
            [_double_conv(2 * widths[i], widths[i]) for i in range(config.depth)]
        )
        self.out_conv = nn.Conv2d(widths[0], 1, 1)
        _seed_init(self, config.seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = 2**self.config.depth
        if x.shape[-2] % d or x.shape[-1] % d:
            raise InvalidInputError(
                f"input size {tuple(x.shape[-2:])} not divisible by 2^depth = {d}"
            )
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for i in reversed(range(self.config.depth)):
            y = self.ups[i](y)
            y = self.dec_blocks[i](torch.cat([skips.pop(), y], dim=1))
        return torch.sigmoid(self.out_conv(y))

    def finetune_parameters(self) -> list[nn.Parameter]:
        """The 'last layers': final decoder block plus output convolution."""
        return list(self.dec_blocks[0].parameters()) + list(self.ups[0].parameters()) + list(
            self.out_conv.parameters()
        )


class _PatchDiscriminator(nn.Module):
    """Small patch critic over (image, mask) stacks for the adversarial term."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(4, 32, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.InstanceNorm2d(64, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 1, 4, padding=1),
        )
        _seed_init(self, seed + 101)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([image, mask], dim=1))


def _seed_init(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            m.weight.data.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            if m.bias is not None:
                m.bias.data.zero_()


def build_unet(cfg: SegmenterConfig) -> UNet:
    """Deterministically initialized U-Net for the given config."""
    return UNet(cfg)


def soft_iou(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable IoU over probabilities: sum(p*y) / sum(p + y - p*y).

    Computed per sample and averaged; the empty-vs-empty case counts as 1,
    matching the hard IoU convention. Equals hard IoU for binary p.
    """
    dims = tuple(range(1, p.ndim))
    inter = (p * y).sum(dims)
    union = (p + y - p * y).sum(dims)
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.ones_like(inter)).mean()


def _to_batch(tiles: list[RasterTile]) -> torch.Tensor:
    arrs = [to_signed(t.pixels).transpose(2, 0, 1) for t in tiles]
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrs)))


def _masks_to_batch(masks: list[FloodMask]) -> torch.Tensor:
    return torch.from_numpy(np.stack([m.mask for m in masks])[:, None].astype(np.float32))


def segment_flood(model: UNet, image: RasterTile) -> FloodMask:
    """Run the segmenter and binarize at the configured threshold."""
    if image.channels != 3:
        raise InvalidInputError("segmentation expects 3-channel tiles")
    with torch.no_grad():
        p = model(_to_batch([image]))[0, 0].numpy()
    return FloodMask(
        (p > model.config.threshold).astype(np.uint8),
        resolution_m_per_px=image.resolution_m_per_px,
    )


def train_segmenter(
    labeled: list[tuple[RasterTile, FloodMask]], cfg: SegmenterConfig = SegmenterConfig()
) -> tuple[UNet, list[dict]]:
    """Two-phase training on (image, mask) pairs.

    Phase 1 minimizes `lambda_l1 * L1 + lambda_iou * (1 - softIoU) +
    lambda_adv * adversarial`; phase 2 freezes everything except the final
    decoder block and minimizes L1 only. Returns the model plus a
    per-epoch loss log. Deterministic in cfg.seed.
    """
    if len(labeled) < 8:
        raise InvalidInputError(f"need at least 8 labeled pairs, got {len(labeled)}")
    ys = _masks_to_batch([m for _, m in labeled])
    if float(ys.mean()) in (0.0, 1.0):
        log.warning("degenerate labels: every pixel is %d", int(ys.mean()))
    xs = _to_batch([t for t, _ in labeled])

    model = build_unet(cfg)
    disc = _PatchDiscriminator(cfg.seed)
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    shuffle = torch.Generator().manual_seed(cfg.seed + 7)
    n = len(labeled)
    history: list[dict] = []

    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=shuffle)
        sums = {"l1": 0.0, "iou": 0.0, "adv": 0.0, "disc": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x, y = xs[idx], ys[idx]
            p = model(x)

            if cfg.lambda_adv > 0:
                opt_d.zero_grad()
                d_real = disc(x, y)
                d_fake = disc(x, p.detach())
                loss_d = 0.5 * (
                    F.mse_loss(d_real, torch.ones_like(d_real))
                    + F.mse_loss(d_fake, torch.zeros_like(d_fake))
                )
                loss_d.backward()
                opt_d.step()
                sums["disc"] += loss_d.item()

            opt_g.zero_grad()
            l1 = F.l1_loss(p, y)
            iou_term = 1.0 - soft_iou(p, y)
            loss = cfg.lambda_l1 * l1 + cfg.lambda_iou * iou_term
            if cfg.lambda_adv > 0:
                score = disc(x, p)
                adv = F.mse_loss(score, torch.ones_like(score))
                loss = loss + cfg.lambda_adv * adv
                sums["adv"] += adv.item()
            loss.backward()
            opt_g.step()
            sums["l1"] += l1.item()
            sums["iou"] += iou_term.item()
            batches += 1
        history.append(
            {"phase": 1, "epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        )

    # phase 2: L1-only finetune of the last layers
    finetune = set(id(p) for p in model.finetune_parameters())
    for p in model.parameters():
        p.requires_grad_(id(p) in finetune)
    opt_ft = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.lr, betas=(0.5, 0.999)
    )
    for epoch in range(cfg.finetune_epochs):
        perm = torch.randperm(n, generator=shuffle)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt_ft.zero_grad()
            loss = F.l1_loss(model(xs[idx]), ys[idx])
            loss.backward()
            opt_ft.step()
            total += loss.item()
            batches += 1
        history.append({"phase": 2, "epoch": epoch, "l1": total / batches})
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, history


@dataclass(frozen=True)
class FoldReport:
    """Cross-validation outcome: fold memberships and per-fold scores."""

    folds: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]  # (train_idx, val_idx)
    fold_ious: tuple[float, ...]
    mean_iou: float

    def __post_init__(self):
        covered = sorted(i for _, val in self.folds for i in val)
        if covered != list(range(len(covered))):
            raise InvalidInputError("validation folds must partition the labeled set")


def kfold_indices(n: int, k: int, seed: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Deterministic k-fold split of range(n): near-equal, disjoint, exhaustive."""
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    if n < k:
        raise InvalidInputError(f"need at least k={k} items, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, k)
    out = []
    for i, part in enumerate(parts):
        val = tuple(int(j) for j in np.sort(part))
        train = tuple(int(j) for j in np.sort(np.concatenate([p for q, p in enumerate(parts) if q != i])))
        out.append((train, val))
    return out


def cross_validate(
    labeled: list[tuple[RasterTile, FloodMask]], k: int, cfg: SegmenterConfig = SegmenterConfig()
) -> FoldReport:
    """k-fold cross validation: train k models, report per-fold mean IoU."""
    from .raster import iou as hard_iou

    folds = kfold_indices(len(labeled), k, cfg.seed)
    fold_ious = []
    for train_idx, val_idx in folds:
        model, _ = train_segmenter([labeled[i] for i in train_idx], cfg)
        scores = [
            hard_iou(segment_flood(model, labeled[i][0]), labeled[i][1]) for i in val_idx
        ]
        fold_ious.append(float(np.mean(scores)))
    return FoldReport(
        folds=tuple(folds), fold_ious=tuple(fold_ious), mean_iou=float(np.mean(fold_ious))
    )


def color_oracle_segmenter(
    color: tuple[int, int, int] = FLOOD_BROWN, tolerance: float = 40.0
):
    """Training-free water detector: Euclidean RGB distance to `color`.

    Suitable for synthetic scenes and overlay outputs whose water color is
    known by construction; `tolerance` 0 matches the color exactly.
    """

    def segment(tile: RasterTile, tile_id: str = "") -> FloodMask:
        if tile.channels != 3:
            raise InvalidInputError("color oracle expects 3-channel tiles")
        px = tile.pixels.astype(np.float32)
        dist = np.linalg.norm(px - np.asarray(color, dtype=np.float32), axis=2)
        return FloodMask(
            (dist <= tolerance).astype(np.uint8), resolution_m_per_px=tile.resolution_m_per_px
        )

    return segment
