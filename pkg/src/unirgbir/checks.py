"""Self-verification suites behind ``unirgbir check``.

Each suite is a list of small checks that build their own toy-sized inputs
and return a :class:`CheckResult`. They are fast enough to run on a fresh
checkout and exercise the same code paths the model trains with.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import oracles
from .backbone import Block
from .core import ModelConfig, MultiScaleTokens, TokenMap, load_checkpoint, mfp_token_count, save_checkpoint
from .evaluate import confusion, grad_check, per_class_scores
from .mfp import MultiModalFeaturePool, MultiReceptiveFuse, Pyramid, StemFeatures
from .model import UniRgbIrModel
from .sfi import CrossAttend, Gate, GateState, reference_points
from .tuning import compute_loss, partition

TOY = ModelConfig(dim=8, stem_channels=8, vit_blocks=4, vit_heads=2, deform_heads=2,
                  deform_points=2, image_size=32)
TOY_LEVELS = [(4, 4), (2, 2), (1, 1)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _randomize(module: torch.nn.Module, std: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def _report(name, report) -> CheckResult:
    return CheckResult(name, report.passed, f"max rel err {report.max_error:.2e} (tol {report.tol:g})")


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------


def grad_fuse(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    fuse = MultiReceptiveFuse(8).double()
    rgb = torch.randn(2, 8, 8, 8, dtype=torch.float64)
    ir = torch.randn(2, 8, 8, 8, dtype=torch.float64)
    tensors = dict(fuse.named_parameters())
    tensors.update(rgb=rgb, ir=ir)
    return _report("grad: mfp fuse", grad_check(lambda: fuse(StemFeatures(rgb, ir)), tensors))


def grad_pyramid(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    pyr = Pyramid(4, 8).double().train()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    tensors = dict(pyr.named_parameters())
    tensors["x"] = x
    return _report("grad: mfp pyramid",
                   grad_check(lambda: torch.cat([lvl.flatten(1) for lvl in pyr(x)], 1), tensors))


def grad_cross_attend(kind: str, seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    cross = CrossAttend(TOY.replace(attention_kind=kind)).double()
    # nonzero offsets so samples land off the bilinear kinks
    _randomize(cross, 0.3, gen)
    vit = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
    mfp = torch.randn(2, 21, 8, generator=gen, dtype=torch.float64)
    tensors = dict(cross.named_parameters())
    tensors.update(vit=vit, mfp=mfp)
    fn = lambda: cross(TokenMap(vit, 2, 2), MultiScaleTokens(mfp, TOY_LEVELS)).tokens  # noqa: E731
    return _report(f"grad: sfi {kind} attention", grad_check(fn, tensors))


def grad_gate(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    gate = Gate(8).double()
    curr = torch.randn(4, 8, dtype=torch.float64)
    prev = torch.randn(4, 8, dtype=torch.float64)
    tensors = dict(gate.named_parameters())
    tensors.update(curr=curr, prev=prev)
    fn = lambda: gate(TokenMap(curr, 2, 2), GateState(TokenMap(prev, 2, 2), 2)).tokens  # noqa: E731
    return _report("grad: sfi gate", grad_check(fn, tensors))


def grad_loss(seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
    gt = torch.randint(0, 4, (2, 3, 3), generator=gen)
    return _report("grad: cross-entropy loss", grad_check(lambda: compute_loss(logits, gt), {"logits": logits}))


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def oracle_cross_attend(kind: str, trials: int = 100, seed: int = 0) -> CheckResult:
    """Vectorized cross-attention vs the per-sample loop reference on random instances."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    worst = peak = 0.0
    for _ in range(trials):
        side = int(rng.choice([32, 64]))  # grids 2x2 or 4x4 queries
        levels = [(side // 8, side // 8), (side // 16, side // 16), (side // 32, side // 32)]
        grid = (side // 16, side // 16)
        cross = CrossAttend(TOY.replace(attention_kind=kind, deform_points=int(rng.integers(1, 4))))
        _randomize(cross, float(rng.uniform(0.1, 0.5)), gen)
        n = sum(h * w for h, w in levels)
        vit = torch.randn(grid[0] * grid[1], 8, generator=gen)
        mfp = torch.randn(n, 8, generator=gen) * 2
        with torch.no_grad():
            out = cross(TokenMap(vit, *grid), MultiScaleTokens(mfp, levels)).tokens.numpy()
        ref = oracles.cross_attend(cross, vit.numpy(), grid, mfp.numpy(), levels)
        worst = max(worst, float(np.abs(out - ref).max()))
        peak = max(peak, float(np.abs(ref).max()))
    return CheckResult(f"oracle: {kind} cross-attention ({trials} trials)", worst < 1e-5,
                       f"max abs diff {worst:.2e} (max |output| {peak:.2f})")


def oracle_vit_block(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    block = Block(8, 1)
    x = torch.randn(4, 8)
    with torch.no_grad():
        out = block(x).numpy()
    diff = float(np.abs(out - oracles.vit_block(block, x.numpy().astype(np.float64))).max())
    return CheckResult("oracle: vit block (4 tokens, D=8, 1 head)", diff < 1e-5, f"max abs diff {diff:.2e}")


def oracle_metrics(trials: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        shape = tuple(rng.integers(1, 7, size=2))
        gt = rng.integers(0, 3, size=shape)
        pred = rng.integers(0, 3, size=shape)
        iou, acc = per_class_scores(confusion(pred, gt, 3))
        ref_iou, ref_acc = oracles.class_scores(pred, gt, 3)
        for c in range(3):
            if ref_iou[c] is None:
                if not np.isnan(iou[c]):
                    return CheckResult("oracle: segmentation metrics", False, f"class {c} should be absent")
                continue
            worst = max(worst, abs(iou[c] - ref_iou[c]), abs(acc[c] - ref_acc[c]))
    return CheckResult(f"oracle: segmentation metrics ({trials} masks)", worst < 1e-9, f"max abs diff {worst:.1e}")


def oracle_loss(seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
    gt = torch.randint(0, 4, (2, 3, 3), generator=gen)
    ref = oracles.cross_entropy(logits.permute(0, 2, 3, 1).reshape(-1, 4).numpy(), gt.reshape(-1).numpy())
    diff = abs(compute_loss(logits, gt).item() - ref)
    return CheckResult("oracle: cross-entropy loss", diff < 1e-12, f"abs diff {diff:.1e}")


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def inv_token_count() -> CheckResult:
    mfp = MultiModalFeaturePool(ModelConfig(stem_channels=4, dim=8, vit_heads=2, deform_heads=2)).eval()
    bad = []
    for side in (64, 128, 256, 512):
        with torch.no_grad():
            ms = mfp(torch.zeros(1, 3, side, side), torch.zeros(1, 1, side, side))
        if ms.n_total != mfp_token_count(side, side) or ms.n_total != side * side * (1 / 64 + 1 / 256 + 1 / 1024):
            bad.append(side)
    return CheckResult("invariant: mfp token count for 64..512", not bad, f"failing sizes {bad}" if bad else "")


def inv_zero_scale(n_pairs: int = 16, seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    cfg = TOY.replace(image_size=64)
    model = UniRgbIrModel(cfg, "full").eval()
    gen = torch.Generator().manual_seed(seed)
    rgb = torch.rand(n_pairs, 3, 64, 64, generator=gen)
    ir = torch.rand(n_pairs, 1, 64, 64, generator=gen)
    with torch.no_grad():
        diff = float((model(rgb, ir) - model.forward_rgb(rgb)).abs().max())
    return CheckResult("invariant: zero injection scale reproduces backbone + head", diff <= 1e-6,
                       f"max abs diff {diff:.1e}")


def inv_gate_convexity(trials: int = 1000, seed: int = 0) -> CheckResult:
    """Random forward passes through a 3-stage SFI chain; every gated output stays in its envelope."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = UniRgbIrModel(TOY, "full").eval()
    stages = [model.sfi[s] for s in ("1", "2", "3")]
    violations = 0
    for t in range(trials):
        if t % 50 == 0:
            for st in stages:
                _randomize(st, 1.0, gen)
        f_mfp = MultiScaleTokens(torch.randn(1, 21, 8, generator=gen), TOY_LEVELS)
        prev = None
        with torch.no_grad():
            for st in stages:
                x = TokenMap(torch.randn(1, 4, 8, generator=gen) * 3, 2, 2)
                f_sfi, tilde = st(x, f_mfp, prev)
                if prev is not None:
                    lo = torch.minimum(prev.tokens, tilde.tokens)
                    hi = torch.maximum(prev.tokens, tilde.tokens)
                    violations += int(((f_sfi.tokens < lo) | (f_sfi.tokens > hi)).sum())
                prev = f_sfi
    return CheckResult(f"invariant: gate convexity ({trials} forward passes)", violations == 0,
                       f"{violations} elements outside envelope")


def inv_attention_normalization(seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    cross = CrossAttend(TOY)
    _randomize(cross, 2.0, gen)
    f_mfp = MultiScaleTokens(torch.randn(3, 21, 8, generator=gen), TOY_LEVELS)
    q = cross.query_norm(torch.randn(3, 4, 8, generator=gen))
    with torch.no_grad():
        _, w = cross.attn(q, reference_points(2, 2), f_mfp.with_tokens(cross.feat_norm(f_mfp.tokens)),
                          return_weights=True)
    err = float((w.sum(dim=(-2, -1)) - 1).abs().max())
    return CheckResult("invariant: deformable weights sum to 1", err < 1e-6, f"max |sum-1| {err:.1e}")


def inv_partition() -> CheckResult:
    problems = []
    for mode in ("full", "mfp_add", "baseline"):
        model = UniRgbIrModel(TOY, mode)
        for paradigm in ("adapter", "full"):
            part = partition(model, paradigm)
            names = {n for n, _ in model.named_parameters()}
            if set(part.theta_V) & set(part.theta_A) or set(part.theta_V) | set(part.theta_A) != names:
                problems.append(f"{mode}/{paradigm}")
    return CheckResult("invariant: parameter partition disjoint and exhaustive", not problems, " ".join(problems))


def inv_checkpoint_round_trip(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    model = UniRgbIrModel(TOY, "full")
    partition(model)
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(model, Path(tmp) / "ckpt", seed=seed)
        loaded = load_checkpoint(Path(tmp) / "ckpt")
    a, b = model.state_dict(), loaded.state_dict()
    same = a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    flags = all(p.requires_grad == q.requires_grad
                for p, q in zip(model.parameters(), loaded.parameters()))
    return CheckResult("invariant: checkpoint round trip bitwise with frozen flags", same and flags)


SUITES = {
    "grad": [grad_fuse, grad_pyramid, lambda: grad_cross_attend("deformable"),
             lambda: grad_cross_attend("global"), grad_gate, grad_loss],
    "oracle": [oracle_vit_block, lambda: oracle_cross_attend("deformable"),
               lambda: oracle_cross_attend("global"), oracle_metrics, oracle_loss],
    "invariants": [inv_token_count, inv_zero_scale, inv_gate_convexity, inv_attention_normalization,
                   inv_partition, inv_checkpoint_round_trip],
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    results = []
    for check in SUITES[name]:
        try:
            results.append(check())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(getattr(check, "__name__", "check"), False, f"{type(exc).__name__}: {exc}"))
    return results
