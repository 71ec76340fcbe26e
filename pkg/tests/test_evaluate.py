import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_pair
from unirgbir import oracles
from unirgbir.core import ModelConfig
from unirgbir.evaluate import (
    confusion,
    dry_run_report,
    evaluate_dataset,
    export_features,
    format_scores,
    grad_check,
    miou_macc,
    param_report,
    per_class_scores,
    read_features,
)
from unirgbir.model import UniRgbIrModel
from unirgbir.tuning import partition


class TestConfusion:
    def test_perfect(self):
        gt = np.array([[0, 1], [2, 2]])
        assert np.array_equal(confusion(gt, gt, 3), np.diag([1, 1, 2]))

    def test_hand_enumerated(self):
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 0]])
        # (gt, pred): (0,0) (0,1) (1,1) (1,0)
        assert np.array_equal(confusion(pred, gt, 2), [[1, 1], [1, 1]])
        iou, acc = per_class_scores(confusion(pred, gt, 2))
        assert np.allclose(iou, [1 / 3, 1 / 3]) and np.allclose(acc, [0.5, 0.5])

    def test_absent_class(self):
        conf = confusion(np.array([0, 2, 2]), np.array([0, 0, 2]), 3)
        assert not conf[1].any() and not conf[:, 1].any()

    def test_range_errors(self):
        with pytest.raises(ValueError):
            confusion(np.array([3]), np.array([0]), 3)
        with pytest.raises(ValueError):
            confusion(np.array([0, 1]), np.array([0]), 3)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.int64, st.integers(1, 40), elements=st.integers(0, 3)), st.randoms())
    def test_conserves_count(self, gt, rnd):
        pred = np.array([rnd.randrange(4) for _ in gt])
        assert confusion(pred, gt, 4).sum() == gt.size


class TestScores:
    def test_perfect(self):
        assert miou_macc(np.diag([5, 3, 2])) == (1.0, 1.0)

    def test_half_covered(self):
        # class 1: 4 gt pixels, pred covers 2 of them and nothing else
        gt = np.array([1, 1, 1, 1, 0, 0])
        pred = np.array([1, 1, 0, 0, 0, 0])
        iou, acc = per_class_scores(confusion(pred, gt, 2))
        assert iou[1] == 0.5 and acc[1] == 0.5

    def test_absent_class_excluded(self):
        conf = confusion(np.array([0, 0]), np.array([0, 0]), 3)
        iou, _ = per_class_scores(conf)
        assert iou[0] == 1.0 and np.isnan(iou[1:]).all()
        assert miou_macc(conf) == (1.0, 1.0)

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            shape = tuple(rng.integers(1, 6, size=2))
            gt = rng.integers(0, 3, size=shape)
            pred = rng.integers(0, 3, size=shape)
            iou, acc = per_class_scores(confusion(pred, gt, 3))
            ref_iou, ref_acc = oracles.class_scores(pred, gt, 3)
            for c in range(3):
                if ref_iou[c] is None:
                    assert np.isnan(iou[c])
                else:
                    assert abs(iou[c] - ref_iou[c]) < 1e-9 and abs(acc[c] - ref_acc[c]) < 1e-9
            m_iou, m_acc = miou_macc(confusion(pred, gt, 3))
            present = [c for c in range(3) if ref_iou[c] is not None]
            assert abs(m_iou - np.mean([ref_iou[c] for c in present])) < 1e-9
            assert abs(m_acc - np.mean([ref_acc[c] for c in present])) < 1e-9
            assert 0 <= m_iou <= 1 and 0 <= m_acc <= 1

    def test_format_mentions_exclusion(self):
        conf = np.diag([2, 2, 0, 1])
        text = format_scores({"iou": per_class_scores(conf)[0], "acc": per_class_scores(conf)[1],
                              "miou": 1.0, "macc": 1.0})
        assert "excluded" in text and "nan" in text


def test_evaluate_dataset(tiny_config):
    from unirgbir.data import generate
    model = UniRgbIrModel(tiny_config, "full")
    scores = evaluate_dataset(model, generate(0, 3, 64, 64), batch_size=2)
    assert scores["confusion"].sum() == 3 * 64 * 64
    assert 0 <= scores["miou"] <= 1
    assert model.training  # restored


class TestExport:
    def _model(self, cfg):
        torch.manual_seed(0)
        return UniRgbIrModel(cfg, "full")

    def test_bookkeeping_and_round_trip(self, tiny_config, rng, tmp_path):
        model = self._model(tiny_config)
        pair = random_pair(rng)
        entries = export_features(model, pair, tmp_path)
        names = [e["name"] for e in entries]
        assert sum(n.startswith("sfi_") and not n.startswith("sfi_tilde") for n in names) == 3
        assert {"f_mfp", "f_fus", "pyramid_8", "pyramid_16", "pyramid_32", "logits"} <= set(names)
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert len(lines) == len(entries)
        assert "sfi_2\tfloat32\t16,16\t2" in lines
        back = read_features(tmp_path)
        assert back["f_mfp"].shape == (84, 16)
        assert back["logits"].shape == (4, 64, 64)

    def test_deterministic_bytes(self, tiny_config, rng, tmp_path):
        model = self._model(tiny_config)
        pair = random_pair(rng)
        export_features(model, pair, tmp_path / "a")
        export_features(model, pair, tmp_path / "b")
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_zero_scale_stage_inputs(self, tiny_config, rng, tmp_path):
        export_features(self._model(tiny_config), random_pair(rng), tmp_path)
        feats = read_features(tmp_path)
        for i in range(1, 5):
            assert np.array_equal(feats[f"stage_input_{i}"], feats[f"vit_{i}"])


class TestParamReport:
    def test_baseline_rows(self, tiny_config):
        model = UniRgbIrModel(tiny_config, "baseline")
        report = param_report(model, partition(model))
        groups = [r[0] for r in report.rows]
        assert not any(g in ("mfp", "sfi") for g in groups)
        assert report.n_total == sum(p.numel() for p in model.parameters())
        assert sum(r[1] + r[2] for r in report.rows) == report.n_total

    def test_full_rows(self, tiny_config):
        model = UniRgbIrModel(tiny_config, "full")
        report = param_report(model, partition(model))
        rows = {r[0]: r for r in report.rows}
        assert rows["mfp"][1] == 0 and rows["sfi"][1] == 0 and rows["backbone.blocks"][2] == 0

    def test_vit_base_dry_run(self):
        report = dry_run_report(ModelConfig.vit_base())
        assert 0.05 <= report.trainable_fraction <= 0.20
        assert f"trainable fraction: {report.trainable_fraction:.4f}" in str(report)
        assert dry_run_report(ModelConfig.vit_base(), paradigm="full").trainable_fraction == 1.0


class TestGradCheck:
    def test_linear_map_machine_precision(self):
        torch.manual_seed(0)
        w = torch.randn(5, 4, dtype=torch.float64)
        x = torch.randn(4, dtype=torch.float64)
        report = grad_check(lambda: w @ x, {"W": w, "x": x})
        assert report.max_error < 1e-8 and report.passed

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x ** 2

            @staticmethod
            def backward(ctx, g):
                return g

        x = torch.randn(6, dtype=torch.float64) + 3
        assert not grad_check(lambda: Bad.apply(x), {"x": x}).passed

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda: torch.ones(1), {"x": torch.ones(2)})
