import csv
import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from floodgen.datagen import synthesize_scene
from floodgen.errors import InvalidInputError, MissingAssetError
from floodgen.metrics import (
    _BACKBONE,
    ConditionMetrics,
    ImageMetrics,
    MetricsConfig,
    MetricsReport,
    PerceptualExtractor,
    compare_models,
    evaluate_model,
    fvps,
    identity_mask_oracle,
    lpips,
)
from floodgen.raster import FloodMask, RasterTile, save_mask, save_tile

EPS = 1e-6


class TestFvps:
    def test_perfect_submetrics(self):
        assert abs(fvps(1.0, 0.0) - 1.0) <= 2 * EPS

    def test_zero_iou_kills_score(self):
        for l in (0.0, 0.3, 1.0):
            assert fvps(0.0, l) <= 2 * EPS

    def test_zero_photorealism_kills_score(self):
        assert fvps(1.0, 1.0) <= 2 * EPS

    def test_table_style_aggregate_value(self):
        # direct evaluation of the harmonic-mean formula, frozen
        assert fvps(0.502, 0.265) == pytest.approx(0.596557219795926, abs=1e-3)

    def test_equal_submetrics_return_value(self):
        rng = np.random.default_rng(0)
        for v in rng.uniform(0, 1, 100):
            assert abs(fvps(float(v), float(1 - v)) - v) <= 2 * EPS

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_harmonic_mean_bounds(self, i, l):
        v = fvps(i, l)
        assert min(i, 1 - l) - 2 * EPS <= v <= max(i, 1 - l) + 2 * EPS

    def test_monotonic_in_iou(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            l = float(rng.uniform(0, 0.99))
            i1, i2 = sorted(rng.uniform(0.01, 1, 2))
            if i2 - i1 < 1e-6:
                continue
            assert fvps(i2, l) > fvps(i1, l)

    def test_antitonic_in_lpips(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            i = float(rng.uniform(0.01, 1))
            l1, l2 = sorted(rng.uniform(0, 0.99, 2))
            if l2 - l1 < 1e-6:
                continue
            assert fvps(i, l2) < fvps(i, l1)

    def test_lpips_above_one_clamped(self):
        assert fvps(0.5, 1.7) == fvps(0.5, 1.0)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            fvps(1.2, 0.0)
        with pytest.raises(InvalidInputError):
            fvps(0.5, -0.1)
        with pytest.raises(InvalidInputError):
            MetricsConfig(epsilon=0.0)


# ---------------------------------------------------------------------------
# independent numpy reference for the perceptual distance


def _conv2d_np(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.empty((o, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, i, j] = np.einsum("chw,ochw->o", patch, w) + b
    return out


def _maxpool_np(x, k=3, s=2):
    c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.empty((c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, i, j] = x[:, i * s : i * s + k, j * s : j * s + k].max(axis=(1, 2))
    return out


def lpips_np(a_u8, b_u8, extractor):
    """Pure-numpy re-derivation of the distance from the same weights."""
    shift = np.array([-0.030, -0.088, -0.188]).reshape(3, 1, 1)
    scale = np.array([0.458, 0.448, 0.450]).reshape(3, 1, 1)

    def feats(img):
        x = (img.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0 - shift) / scale
        taps = []
        for conv, (_, _, _, stride, pad, pool) in zip(extractor.convs, _BACKBONE):
            if pool:
                x = _maxpool_np(x)
            w = conv.weight.numpy().astype(np.float64)
            bias = conv.bias.numpy().astype(np.float64)
            x = np.maximum(_conv2d_np(x, w, bias, stride, pad), 0.0)
            taps.append(x)
        return taps

    total = 0.0
    for xa, xb, lin in zip(feats(a_u8), feats(b_u8), extractor.lins):
        na = xa / (np.sqrt((xa**2).sum(0, keepdims=True)) + 1e-10)
        nb = xb / (np.sqrt((xb**2).sum(0, keepdims=True)) + 1e-10)
        diff = (na - nb) ** 2
        wl = lin.weight.numpy().astype(np.float64).reshape(-1, 1, 1)
        total += (diff * wl).sum(0).mean()
    return total


@pytest.fixture(scope="module")
def extractor():
    return PerceptualExtractor.random(seed=0)


@pytest.fixture(scope="module")
def tile_pair():
    a = synthesize_scene(seed=21, size=(64, 64), water_fraction=0.3)
    b = synthesize_scene(seed=22, size=(64, 64), water_fraction=0.3)
    return a.post, b.post


class TestLpips:
    def test_identity_is_zero(self, extractor, tile_pair):
        assert lpips(tile_pair[0], tile_pair[0], extractor) == 0.0

    def test_symmetry(self, extractor, tile_pair):
        a, b = tile_pair
        assert abs(lpips(a, b, extractor) - lpips(b, a, extractor)) < 1e-9

    def test_non_negative_and_positive_for_distinct(self, extractor, tile_pair):
        a, b = tile_pair
        assert lpips(a, b, extractor) > 0.0

    def test_matches_numpy_reference(self, extractor, tile_pair):
        a, b = tile_pair
        ours = lpips(a, b, extractor)
        ref = lpips_np(a.pixels, b.pixels, extractor)
        assert ours == pytest.approx(ref, rel=1e-4, abs=1e-7)

    def test_shape_mismatch(self, extractor):
        a = RasterTile(np.zeros((64, 64, 3), dtype=np.uint8))
        b = RasterTile(np.zeros((64, 96, 3), dtype=np.uint8))
        with pytest.raises(InvalidInputError):
            lpips(a, b, extractor)

    def test_random_extractor_deterministic(self):
        a = PerceptualExtractor.random(seed=5)
        b = PerceptualExtractor.random(seed=5)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_missing_asset_is_loud(self, tmp_path):
        with pytest.raises(MissingAssetError, match="fetch_perceptual_weights"):
            PerceptualExtractor.from_asset(tmp_path / "absent.npz")

    def test_asset_roundtrip(self, tmp_path, extractor, tile_pair):
        arrays = {}
        for i, conv in enumerate(extractor.convs):
            arrays[f"conv{i}_weight"] = conv.weight.numpy()
            arrays[f"conv{i}_bias"] = conv.bias.numpy()
        for i, lin in enumerate(extractor.lins):
            arrays[f"lin{i}"] = lin.weight.numpy().reshape(-1)
        np.savez(tmp_path / "asset.npz", **arrays)
        loaded = PerceptualExtractor.from_asset(tmp_path / "asset.npz")
        a, b = tile_pair
        assert lpips(a, b, loaded) == pytest.approx(lpips(a, b, extractor), rel=1e-6)
        assert loaded.kind == "pretrained"


class TestReport:
    def _report(self, model="m", iou_v=0.5, lpips_v=0.2):
        cfg = MetricsConfig()
        rows = tuple(
            ImageMetrics(f"id{k}", iou_v, lpips_v, fvps(iou_v, lpips_v, cfg)) for k in range(3)
        )
        cond = ConditionMetrics(
            rows=rows,
            mean_iou=iou_v,
            mean_lpips=lpips_v,
            mean_fvps=float(np.mean([r.fvps for r in rows])),
        )
        return MetricsReport(
            model=model,
            segmenter_id="seg-0",
            epsilon=cfg.epsilon,
            conditions={"high_res": cond, "low_res": cond},
        )

    def test_roundtrip(self, tmp_path):
        rep = self._report()
        rep.save(tmp_path / "r.json")
        back = MetricsReport.load(tmp_path / "r.json")
        assert back == rep
        back.validate()

    def test_schema_tag(self, tmp_path):
        rep = self._report()
        rep.save(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["schema"] == "fvps-report/1"

    def test_validate_catches_tampering(self):
        rep = self._report()
        bad_rows = (ImageMetrics("id0", 0.5, 0.2, 0.99),)
        bad = MetricsReport(
            model="m",
            segmenter_id="s",
            epsilon=1e-6,
            conditions={"high_res": ConditionMetrics(bad_rows, 0.5, 0.2, 0.99)},
        )
        with pytest.raises(InvalidInputError):
            bad.validate()


class TestCompare:
    def _report(self, model, values):
        # values: {(metric, condition): v}
        conds = {}
        for cond in ("high_res", "low_res"):
            rows = (ImageMetrics("a", values[("iou", cond)], values[("lpips", cond)], values[("fvps", cond)]),)
            conds[cond] = ConditionMetrics(
                rows, values[("iou", cond)], values[("lpips", cond)], values[("fvps", cond)]
            )
        return MetricsReport(model=model, segmenter_id="s", epsilon=1e-6, conditions=conds)

    def test_single_report_all_best(self):
        rep = self._report("only", {(m, c): 0.5 for m in ("iou", "lpips", "fvps") for c in ("high_res", "low_res")})
        text, _ = compare_models([rep])
        assert text.count("*") == 6

    def test_best_flags(self):
        a = self._report(
            "physics",
            {
                ("lpips", "high_res"): 0.265, ("lpips", "low_res"): 0.283,
                ("iou", "high_res"): 0.502, ("iou", "low_res"): 0.365,
                ("fvps", "high_res"): 0.533, ("fvps", "low_res"): 0.408,
            },
        )
        b = self._report(
            "baseline",
            {
                ("lpips", "high_res"): 0.399, ("lpips", "low_res"): 0.415,
                ("iou", "high_res"): 0.470, ("iou", "low_res"): 0.361,
                ("fvps", "high_res"): 0.411, ("fvps", "low_res"): 0.359,
            },
        )
        text, csv_text = compare_models([a, b])
        physics_line = next(l for l in text.splitlines() if l.startswith("physics"))
        baseline_line = next(l for l in text.splitlines() if l.startswith("baseline"))
        assert physics_line.count("*") == 6  # best everywhere (lpips lower, iou/fvps higher)
        assert baseline_line.count("*") == 0

    def test_csv_roundtrip_six_decimals(self):
        rep = self._report("m", {(m, c): 0.1234567 for m in ("iou", "lpips", "fvps") for c in ("high_res", "low_res")})
        _, csv_text = compare_models([rep])
        rows = list(csv.reader(io.StringIO(csv_text)))
        assert rows[0][0] == "model"
        assert all(v == "0.123457" for v in rows[1][1:])

    def test_mismatched_test_sets_rejected(self):
        a = self._report("a", {(m, c): 0.5 for m in ("iou", "lpips", "fvps") for c in ("high_res", "low_res")})
        b = self._report("b", {(m, c): 0.5 for m in ("iou", "lpips", "fvps") for c in ("high_res", "low_res")})
        rows = (ImageMetrics("zzz", 0.5, 0.5, 0.5),)
        b = MetricsReport(
            model="b",
            segmenter_id="s",
            epsilon=1e-6,
            conditions={
                "high_res": ConditionMetrics(rows, 0.5, 0.5, 0.5),
                "low_res": ConditionMetrics(rows, 0.5, 0.5, 0.5),
            },
        )
        with pytest.raises(InvalidInputError):
            compare_models([a, b])


class TestEvaluate:
    @pytest.fixture()
    def layout(self, tmp_path):
        recs = [synthesize_scene(seed=s, size=(64, 64), water_fraction=0.3) for s in (31, 32, 33)]
        gen = tmp_path / "generated"
        truth = tmp_path / "truth"
        masks = tmp_path / "masks"
        for d in (gen / "high_res", gen / "low_res", truth, masks):
            d.mkdir(parents=True)
        for rec in recs:
            save_tile(rec.post, gen / "high_res" / f"{rec.id}.png")
            save_tile(rec.post, gen / "low_res" / f"{rec.id}.png")
            save_tile(rec.post, truth / f"{rec.id}.png")
            save_mask(rec.mask, masks / f"{rec.id}.png")
        return gen, truth, masks, recs

    def test_self_comparison_is_perfect(self, layout, extractor):
        gen, truth, masks, _ = layout
        rep = evaluate_model(
            gen, truth, masks, identity_mask_oracle(masks), extractor, model_name="self"
        )
        for cond in ("high_res", "low_res"):
            assert rep.conditions[cond].mean_iou == 1.0
            assert rep.conditions[cond].mean_lpips == 0.0
            assert rep.conditions[cond].mean_fvps == pytest.approx(1.0, abs=3e-6)
        rep.validate()

    def test_aggregate_is_mean_of_rows(self, layout, extractor):
        gen, truth, masks, recs = layout
        # overwrite one generated image so rows differ
        other = synthesize_scene(seed=99, size=(64, 64), water_fraction=0.5)
        save_tile(other.post, gen / "high_res" / f"{recs[0].id}.png")
        rep = evaluate_model(gen, truth, masks, identity_mask_oracle(masks), extractor)
        cond = rep.conditions["high_res"]
        assert cond.mean_fvps == pytest.approx(np.mean([r.fvps for r in cond.rows]))
        assert cond.mean_lpips == pytest.approx(np.mean([r.lpips for r in cond.rows]))

    def test_id_mismatch_rejected(self, layout, extractor):
        gen, truth, masks, recs = layout
        (gen / "high_res" / f"{recs[0].id}.png").unlink()
        with pytest.raises(InvalidInputError):
            evaluate_model(gen, truth, masks, identity_mask_oracle(masks), extractor)

    def test_flat_generated_dir_is_high_res(self, layout, extractor):
        gen, truth, masks, recs = layout
        flat = gen.parent / "flat"
        flat.mkdir()
        for rec in recs:
            save_tile(rec.post, flat / f"{rec.id}.png")
        rep = evaluate_model(flat, truth, masks, identity_mask_oracle(masks), extractor)
        assert set(rep.conditions) == {"high_res"}

    def test_dataset_shaped_truth_dir(self, tmp_path, extractor):
        from floodgen.datagen import write_records

        recs = [synthesize_scene(seed=s, size=(64, 64), water_fraction=0.3) for s in (41, 42)]
        write_records(recs, tmp_path / "test")
        gen = tmp_path / "gen"
        gen.mkdir()
        for rec in recs:
            save_tile(rec.post, gen / f"{rec.id}.png")
        rep = evaluate_model(
            gen, tmp_path / "test", tmp_path / "test", identity_mask_oracle(tmp_path / "test"), extractor
        )
        assert rep.conditions["high_res"].mean_iou == 1.0
