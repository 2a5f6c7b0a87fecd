import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodgen.datagen import synthesize_scene
from floodgen.errors import InvalidInputError
from floodgen.raster import FloodMask, RasterTile, iou, overlay_flood
from floodgen.segment import (
    FoldReport,
    SegmenterConfig,
    build_unet,
    color_oracle_segmenter,
    cross_validate,
    kfold_indices,
    segment_flood,
    soft_iou,
    train_segmenter,
)

TINY = SegmenterConfig(depth=2, base_width=8, epochs=2, finetune_epochs=1, batch_size=4)


def labeled_set(n, size=(64, 64), start_seed=200):
    recs = [
        synthesize_scene(seed=start_seed + i, size=size, water_fraction=0.2 + 0.4 * (i % 4) / 4)
        for i in range(n)
    ]
    return [(r.post, r.mask) for r in recs]


class TestUNet:
    def test_shape_contract(self):
        model = build_unet(SegmenterConfig(depth=4, base_width=8))
        x = torch.zeros(1, 3, 256, 256)
        with torch.no_grad():
            y = model(x)
        assert y.shape == (1, 1, 256, 256)
        assert ((0 < y) & (y < 1)).all()

    def test_seeded_init_identical(self):
        a = build_unet(SegmenterConfig(seed=3))
        b = build_unet(SegmenterConfig(seed=3))
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = build_unet(SegmenterConfig(seed=3, depth=2, base_width=8))
        b = build_unet(SegmenterConfig(seed=4, depth=2, base_width=8))
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.state_dict().values(), b.state_dict().values())
        )

    def test_divisibility_enforced(self):
        model = build_unet(SegmenterConfig(depth=4, base_width=8))
        with pytest.raises(InvalidInputError):
            model(torch.zeros(1, 3, 100, 100))


class TestSoftIoU:
    def test_exact_match_is_one(self):
        y = torch.tensor([[[[0.0, 1.0], [1.0, 0.0]]]])
        assert soft_iou(y, y).item() == pytest.approx(1.0)

    def test_zero_weight_reduction(self):
        p = torch.rand(2, 1, 8, 8)
        y = (torch.rand(2, 1, 8, 8) > 0.5).float()
        v = soft_iou(p, y)
        assert 0.0 <= v.item() <= 1.0

    @given(
        arrays(np.uint8, (6, 6), elements=st.integers(0, 1)),
        arrays(np.uint8, (6, 6), elements=st.integers(0, 1)),
    )
    @settings(max_examples=100, deadline=None)
    def test_equals_hard_iou_for_binary_p(self, a, b):
        p = torch.from_numpy(a.astype(np.float32))[None, None]
        y = torch.from_numpy(b.astype(np.float32))[None, None]
        expected = iou(FloodMask(a), FloodMask(b))
        assert soft_iou(p, y).item() == pytest.approx(expected, abs=1e-6)

    def test_empty_empty_is_one(self):
        z = torch.zeros(1, 1, 4, 4)
        assert soft_iou(z, z).item() == 1.0


class TestTraining:
    def test_requires_eight_pairs(self):
        with pytest.raises(InvalidInputError):
            train_segmenter(labeled_set(4), TINY)

    def test_pure_l1_mode(self):
        cfg = SegmenterConfig(
            depth=2, base_width=8, epochs=2, finetune_epochs=0, batch_size=4, lambda_iou=0.0, lambda_adv=0.0
        )
        model, hist = train_segmenter(labeled_set(8), cfg)
        assert all(h["adv"] == 0.0 and h["disc"] == 0.0 for h in hist if h["phase"] == 1)

    def test_history_structure(self):
        model, hist = train_segmenter(labeled_set(8), TINY)
        assert sum(h["phase"] == 1 for h in hist) == TINY.epochs
        assert sum(h["phase"] == 2 for h in hist) == TINY.finetune_epochs

    def test_deterministic(self):
        a, _ = train_segmenter(labeled_set(8), TINY)
        b, _ = train_segmenter(labeled_set(8), TINY)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_finetune_freezes_early_blocks(self):
        labeled = labeled_set(8)
        cfg = SegmenterConfig(depth=2, base_width=8, epochs=1, finetune_epochs=0, batch_size=4)
        model, _ = train_segmenter(labeled, cfg)
        frozen_before = {
            k: v.clone() for k, v in model.state_dict().items()
        }
        # run phase 2 manually through the public API: retrain with finetune
        cfg2 = SegmenterConfig(depth=2, base_width=8, epochs=1, finetune_epochs=2, batch_size=4)
        model2, _ = train_segmenter(labeled, cfg2)
        ft_names = set()
        for name, p in model2.named_parameters():
            if any(p is q for q in model2.finetune_parameters()):
                ft_names.add(name)
        # frozen parameters must match the phase-1-only run byte for byte
        for name, v in model2.state_dict().items():
            if name in ft_names:
                continue
            assert torch.equal(v, frozen_before[name]), name

    def test_segment_flood_contract(self):
        model, _ = train_segmenter(labeled_set(8), TINY)
        rec = synthesize_scene(seed=999, size=(64, 64), water_fraction=0.3)
        out = segment_flood(model, rec.post)
        assert out.shape == (64, 64)
        assert np.isin(out.mask, (0, 1)).all()
        assert out.resolution_m_per_px == rec.post.resolution_m_per_px


class TestKFold:
    def test_92_items_four_folds_of_23(self):
        folds = kfold_indices(92, 4, seed=0)
        assert [len(val) for _, val in folds] == [23, 23, 23, 23]

    def test_disjoint_exhaustive(self):
        folds = kfold_indices(30, 4, seed=1)
        vals = [set(val) for _, val in folds]
        assert set().union(*vals) == set(range(30))
        for i in range(4):
            for j in range(i + 1, 4):
                assert not vals[i] & vals[j]
        for train, val in folds:
            assert set(train) == set(range(30)) - set(val)

    def test_deterministic(self):
        assert kfold_indices(20, 4, seed=5) == kfold_indices(20, 4, seed=5)

    def test_k_less_than_two_rejected(self):
        with pytest.raises(InvalidInputError):
            kfold_indices(10, 1, seed=0)

    def test_fewer_items_than_k(self):
        with pytest.raises(InvalidInputError):
            kfold_indices(3, 4, seed=0)

    def test_mean_is_arithmetic_mean(self):
        fr = FoldReport(
            folds=(((1, 2, 3), (0,)), ((0, 2, 3), (1,)), ((0, 1, 3), (2,)), ((0, 1, 2), (3,))),
            fold_ious=(0.2, 0.4, 0.6, 0.8),
            mean_iou=0.5,
        )
        assert fr.mean_iou == pytest.approx(np.mean(fr.fold_ious))

    def test_cross_validate_smoke(self):
        cfg = SegmenterConfig(depth=2, base_width=8, epochs=1, finetune_epochs=0, batch_size=8)
        report = cross_validate(labeled_set(16), k=2, cfg=cfg)
        assert len(report.fold_ious) == 2
        assert report.mean_iou == pytest.approx(np.mean(report.fold_ious))


class TestColorOracle:
    def test_recovers_overlay_mask_exactly(self):
        rec = synthesize_scene(seed=55, size=(64, 64), water_fraction=0.3)
        painted = overlay_flood(rec.pre, rec.mask)
        oracle = color_oracle_segmenter(tolerance=0.0)
        got = oracle(painted, rec.id)
        assert iou(got, rec.mask) == 1.0

    def test_recovers_synthetic_water(self):
        rec = synthesize_scene(seed=56, size=(128, 128), water_fraction=0.35)
        oracle = color_oracle_segmenter(tolerance=40.0)
        got = oracle(rec.post, rec.id)
        assert iou(got, rec.mask) > 0.9

    def test_dry_scene_negative(self):
        rec = synthesize_scene(seed=57, size=(64, 64), water_fraction=0.0)
        oracle = color_oracle_segmenter(tolerance=40.0)
        assert oracle(rec.post, rec.id).area_fraction < 0.05
