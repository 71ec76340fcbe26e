"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 2, 8 and 10 share one training fixture: pretrain on RGB, then train
full and mfp_add adapters for 2000 steps and a full fine-tune for 500 steps,
all on the seed-0 synthetic dataset. Expect roughly 40 minutes on one CPU core.
"""

import time

import numpy as np
import pytest
import torch

from unirgbir import oracles
from unirgbir.backbone import make_frozen_backbone
from unirgbir.cli import PRETRAIN_LR
from unirgbir.core import ModelConfig, MultiScaleTokens, TokenMap, TrainConfig
from unirgbir.data import generate, split
from unirgbir.evaluate import confusion, dry_run_report, evaluate_dataset, grad_check, miou_macc, per_class_scores
from unirgbir.mfp import MultiModalFeaturePool, MultiReceptiveFuse, Pyramid, StemFeatures
from unirgbir.model import UniRgbIrModel
from unirgbir.sfi import CrossAttend, Gate, GateState
from unirgbir.tuning import compute_loss, run_training

IR_ONLY = 2


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    return emit


def _randomize(module, std, gen):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


# ---------------------------------------------------------------------------
# shared training runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def runs():
    t0 = time.time()
    cfg = ModelConfig()
    train_set, val_set = split(generate(0, 400, 128, 128))
    train_cfg = TrainConfig()  # 2000 steps, batch 8, lr 2e-4, seed 0
    pre, _ = make_frozen_backbone(cfg, train_set, train_cfg.replace(lr=PRETRAIN_LR, eval_interval=500))
    frozen = {n: p.detach().clone() for n, p in pre.backbone.named_parameters()}
    drift_at_500 = []

    def watch(state):
        if state.step == 500:
            drift_at_500.extend(n for n, p in state.model.backbone.named_parameters()
                                if not torch.equal(p, frozen[n]))

    full = run_training(cfg, train_set, val_set, mode="full", train_config=train_cfg,
                        pretrained=pre, on_step=watch)
    add = run_training(cfg, train_set, val_set, mode="mfp_add", train_config=train_cfg, pretrained=pre)
    tune_all = run_training(cfg, train_set, val_set, mode="full", paradigm="full",
                            train_config=train_cfg.replace(steps=500), pretrained=pre)
    return {
        "pre": pre, "full": full, "mfp_add": add, "finetune_all": tune_all, "val": val_set,
        "frozen": frozen, "drift_at_500": drift_at_500, "seconds": time.time() - t0,
    }


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_token_count(report):
    t0 = time.time()
    mfp = MultiModalFeaturePool(ModelConfig()).eval()
    counts = {}
    for side in (64, 128, 256, 512):
        with torch.no_grad():
            counts[side] = mfp(torch.rand(1, 3, side, side), torch.rand(1, 1, side, side)).n_total
    expected = {s: s * s // 64 + s * s // 256 + s * s // 1024 for s in counts}
    passed = counts == expected and counts[512] == 5376
    report(1, passed, f"F_mfp lengths {counts} vs HW/64+HW/256+HW/1024 ({time.time() - t0:.1f}s)")
    assert passed


def test_criterion_02_freeze_invariance(runs, report):
    full = runs["full"]
    end_drift = [n for n, p in full.model.backbone.named_parameters() if not torch.equal(p, runs["frozen"][n])]
    passed = not runs["drift_at_500"] and not end_drift
    report(2, passed, f"{len(runs['frozen'])} backbone tensors bitwise unchanged after 500 steps "
                      f"(changed: {runs['drift_at_500']}) and after 2000 (changed: {end_drift})")
    assert passed


def test_criterion_03_zero_init_equivalence(report):
    torch.manual_seed(0)
    model = UniRgbIrModel(ModelConfig(), "full").eval()
    assert all(s.scale.item() == 0.0 for s in model.sfi.values())
    gen = torch.Generator().manual_seed(0)
    rgb = torch.rand(16, 3, 128, 128, generator=gen)
    ir = torch.rand(16, 1, 128, 128, generator=gen)
    with torch.no_grad():
        diff = float((model(rgb, ir) - model.forward_rgb(rgb)).abs().max())
    passed = diff <= 1e-6
    report(3, passed, f"max |full - backbone+head| over 16 pairs = {diff:.2e} (tol 1e-6, float32)")
    assert passed


def test_criterion_04_gate_convexity(report):
    cfg = ModelConfig(dim=32, deform_heads=4)
    torch.manual_seed(0)
    model = UniRgbIrModel(cfg.replace(vit_blocks=4, image_size=64), "full").eval()
    stages = [model.sfi[s] for s in ("1", "2", "3")]
    gen = torch.Generator().manual_seed(0)
    levels = [(8, 8), (4, 4), (2, 2)]
    violations = checked = 0
    for trial in range(1000):
        if trial % 20 == 0:
            for st in stages:
                _randomize(st, 0.5, gen)
        f_mfp = MultiScaleTokens(torch.randn(2, 84, 32, generator=gen) * 2, levels)
        prev = None
        with torch.no_grad():
            for st in stages:
                f_vit = TokenMap(torch.randn(2, 16, 32, generator=gen) * 2, 4, 4)
                f_sfi, tilde = st(f_vit, f_mfp, prev)
                if prev is not None:
                    lo = torch.minimum(prev.tokens, tilde.tokens)
                    hi = torch.maximum(prev.tokens, tilde.tokens)
                    violations += int(((f_sfi.tokens < lo) | (f_sfi.tokens > hi)).sum())
                    checked += f_sfi.tokens.numel()
                prev = f_sfi
    passed = violations == 0
    report(4, passed, f"{violations} of {checked} gated elements outside their envelope over 1000 passes")
    assert passed


def _oracle_trial(kind, rng, gen):
    small = ModelConfig(dim=8, stem_channels=8, vit_heads=2, deform_heads=2)
    side = int(rng.choice([32, 64]))
    levels = [(side // 8,) * 2, (side // 16,) * 2, (side // 32,) * 2]
    grid = (side // 16, side // 16)
    cross = CrossAttend(small.replace(attention_kind=kind, deform_points=int(rng.integers(1, 5))))
    _randomize(cross, float(rng.uniform(0.1, 0.5)), gen)
    vit = torch.randn(grid[0] * grid[1], 8, generator=gen)
    mfp = torch.randn(sum(h * w for h, w in levels), 8, generator=gen) * 2
    with torch.no_grad():
        out = cross(TokenMap(vit, *grid), MultiScaleTokens(mfp, levels)).tokens.numpy()
    ref = oracles.cross_attend(cross, vit.numpy(), grid, mfp.numpy(), levels)
    return float(np.abs(out - ref).max())


def test_criterion_05_attention_oracles(report):
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    worst = {kind: max(_oracle_trial(kind, rng, gen) for _ in range(100)) for kind in ("deformable", "global")}
    passed = all(v < 1e-5 for v in worst.values())
    report(5, passed, "max abs diff over 100 trials each: "
                      + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " (tol 1e-5)")
    assert passed


def test_criterion_06_gradient_checks(report):
    gen = torch.Generator().manual_seed(0)
    torch.manual_seed(0)
    reports = {}

    fuse = MultiReceptiveFuse(8).double()
    rgb, ir = (torch.randn(2, 8, 8, 8, generator=gen, dtype=torch.float64) for _ in range(2))
    reports["mfp fuse"] = grad_check(lambda: fuse(StemFeatures(rgb, ir)),
                                     {**dict(fuse.named_parameters()), "rgb": rgb, "ir": ir})

    pyr = Pyramid(4, 8).double().train()
    x = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)
    reports["mfp pyramid"] = grad_check(lambda: torch.cat([lv.flatten(1) for lv in pyr(x)], 1),
                                        {**dict(pyr.named_parameters()), "x": x})

    small = ModelConfig(dim=8, stem_channels=8, vit_heads=2, deform_heads=2, deform_points=2)
    levels = [(4, 4), (2, 2), (1, 1)]
    for kind in ("deformable", "global"):
        cross = CrossAttend(small.replace(attention_kind=kind)).double()
        _randomize(cross, 0.3, gen)
        vit = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
        mfp = torch.randn(2, 21, 8, generator=gen, dtype=torch.float64)
        reports[f"sfi {kind} attention"] = grad_check(
            lambda: cross(TokenMap(vit, 2, 2), MultiScaleTokens(mfp, levels)).tokens,
            {**dict(cross.named_parameters()), "vit": vit, "mfp": mfp})

    gate = Gate(8).double()
    curr, prev = (torch.randn(4, 8, generator=gen, dtype=torch.float64) for _ in range(2))
    reports["sfi gate"] = grad_check(
        lambda: gate(TokenMap(curr, 2, 2), GateState(TokenMap(prev, 2, 2), 2)).tokens,
        {**dict(gate.named_parameters()), "curr": curr, "prev": prev})

    logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
    gt = torch.randint(0, 4, (2, 3, 3), generator=gen)
    reports["loss"] = grad_check(lambda: compute_loss(logits, gt), {"logits": logits})

    passed = all(r.passed for r in reports.values())
    report(6, passed, "max rel err: " + ", ".join(f"{k} {r.max_error:.1e}" for k, r in reports.items())
           + " (tol 1e-3, float64)")
    assert passed, "\n\n".join(f"{k}\n{r}" for k, r in reports.items() if not r.passed)


def test_criterion_07_metric_correctness(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(25):
        shape = tuple(rng.integers(2, 7, size=2))
        gt = rng.integers(0, 3, size=shape)
        pred = rng.integers(0, 3, size=shape)
        conf = confusion(pred, gt, 3)
        miou, macc = miou_macc(conf)
        ref_iou, ref_acc = oracles.class_scores(pred, gt, 3)
        present = [c for c in range(3) if ref_iou[c] is not None]
        worst = max(worst, abs(miou - sum(ref_iou[c] for c in present) / len(present)),
                    abs(macc - sum(ref_acc[c] for c in present) / len(present)))
        iou, acc = per_class_scores(conf)
        for c in present:
            worst = max(worst, abs(iou[c] - ref_iou[c]), abs(acc[c] - ref_acc[c]))
    passed = worst < 1e-9
    report(7, passed, f"max |metric - pixel-count reference| over 25 masks = {worst:.1e} (tol 1e-9)")
    assert passed


def test_criterion_08_multimodal_necessity(runs, report):
    val = runs["val"]
    rgb_only = evaluate_dataset(runs["pre"], val, rgb_only=True)
    full = evaluate_dataset(runs["full"].model, val)
    add = evaluate_dataset(runs["mfp_add"].model, val)
    gain = full["iou"][IR_ONLY] - rgb_only["iou"][IR_ONLY]
    passed = gain >= 0.20 and full["miou"] >= add["miou"]
    report(8, passed, f"ir-only IoU full {full['iou'][IR_ONLY]:.4f} vs RGB-only {rgb_only['iou'][IR_ONLY]:.4f} "
                      f"(gain {gain:+.4f}, need >= 0.20); mIoU full {full['miou']:.4f} vs mfp_add "
                      f"{add['miou']:.4f} vs RGB-only {rgb_only['miou']:.4f}")
    assert passed


def test_criterion_09_parameter_fraction(report):
    rep = dry_run_report(ModelConfig.vit_base())
    full = dry_run_report(ModelConfig.vit_base(), paradigm="full")
    passed = 0.05 <= rep.trainable_fraction <= 0.20
    report(9, passed, f"ViT-Base dry run trainable fraction {rep.trainable_fraction:.4f} "
                      f"({rep.n_trainable:,} of {full.n_trainable:,}); need [0.05, 0.20]")
    assert passed


def _moving_average(x, k=10):
    return np.convolve(np.asarray(x, dtype=np.float64), np.ones(k) / k, mode="valid")


def test_criterion_10_training_efficiency(runs, report):
    adapter = np.asarray(runs["full"].losses[:500])
    tune_all = np.asarray(runs["finetune_all"].losses[:500])
    ma_a, ma_f = _moving_average(adapter), _moving_average(tune_all)
    target = ma_f[-1]
    reached = np.nonzero(ma_a <= target)[0]
    reach_step = int(reached[0]) + 10 if reached.size else None
    rises = np.diff(ma_a) > 0
    passed = not rises.any()
    curve = "  ".join(f"{s}:{ma_a[s - 10]:.3f}/{ma_f[s - 10]:.3f}" for s in (10, 50, 100, 200, 300, 400, 500))
    report(10, passed, f"adapter 10-step MA rises at {int(rises.sum())} of {rises.size} steps "
                       f"(first at step {int(np.argmax(rises)) + 11 if rises.any() else '-'}); "
                       f"full fine-tune step-500 MA loss {target:.4f} reached by adapter at step "
                       f"{reach_step if reach_step is not None else '> 500'}; MA adapter/full-ft {curve}; "
                       f"shared training fixture {runs['seconds'] / 60:.1f} min")
    assert passed
