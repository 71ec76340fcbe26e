"""Segmentation metrics, intermediate-feature export, finite-difference gradient
checks and trainable-parameter reports."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .core import ImagePair, ModelConfig

EXPORT_MANIFEST = "manifest.txt"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts with rows = ground-truth class, columns = predicted class."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt sizes differ: {pred.size} vs {gt.size}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} values outside 0..{n_classes - 1}")
    flat = gt.astype(np.int64) * n_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_scores(conf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU and accuracy; NaN for classes absent from the ground truth."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    present = gt_count > 0
    iou = np.full(len(tp), np.nan)
    acc = np.full(len(tp), np.nan)
    iou[present] = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    acc[present] = tp[present] / gt_count[present]
    return iou, acc


def miou_macc(conf: np.ndarray) -> tuple[float, float]:
    """Mean IoU and mean accuracy over classes present in the ground truth."""
    iou, acc = per_class_scores(conf)
    if np.all(np.isnan(iou)):
        return float("nan"), float("nan")
    return float(np.nanmean(iou)), float(np.nanmean(acc))


@torch.no_grad()
def evaluate_dataset(model, dataset, batch_size: int = 16, rgb_only: bool = False) -> dict:
    """Confusion matrix and scores of ``model`` on ``dataset``.

    ``rgb_only`` evaluates the frozen backbone + head path without adapters.
    """
    from .data import iterate_batches

    was_training = model.training
    model.eval()
    k = model.config.head_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for rgb, ir, gt in iterate_batches(dataset, batch_size):
        if rgb_only:
            logits = model.forward_rgb(rgb)
        else:
            logits = model(rgb, ir) if model.uses_ir else model(rgb)
        conf += confusion(logits.argmax(1).numpy(), gt.numpy(), k)
    model.train(was_training)
    iou, acc = per_class_scores(conf)
    miou, macc = miou_macc(conf)
    return {"confusion": conf, "iou": iou, "acc": acc, "miou": miou, "macc": macc}


def format_scores(scores: dict, class_names=None) -> str:
    k = len(scores["iou"])
    names = class_names or [f"class_{i}" for i in range(k)]
    lines = ["# classes absent from ground truth are excluded from the means",
             f"{'class':<12} {'IoU':>8} {'Acc':>8}"]
    for name, iou, acc in zip(names, scores["iou"], scores["acc"]):
        lines.append(f"{name:<12} {iou:8.4f} {acc:8.4f}")
    lines.append(f"{'mean':<12} {scores['miou']:8.4f} {scores['macc']:8.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Feature export
# ---------------------------------------------------------------------------


def _stage_tag(name: str) -> str:
    m = re.search(r"_(\d+)$", name)
    return m.group(1) if m and not name.startswith("pyramid") else "-"


def export_features(model, pair: ImagePair, path) -> list[dict]:
    """Dump every intermediate tensor of one forward pass as raw little-endian arrays.

    Writes ``<name>.bin`` per array and ``manifest.txt`` with one line per
    array: name, dtype, comma-separated shape, stage tag.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    rgb, ir = pair.to_tensors(dtype=dtype)
    record: dict = {}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        record["logits"] = model(rgb, ir, record=record) if model.mode != "rgb" else model(rgb, record=record)
    model.train(was_training)
    entries = []
    for name, tensor in record.items():
        arr = tensor.detach().cpu().numpy()[0]
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        (path / f"{name}.bin").write_bytes(arr.tobytes())
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": arr.shape, "stage": _stage_tag(name)})
    lines = [f"{e['name']}\t{e['dtype']}\t{','.join(map(str, e['shape']))}\t{e['stage']}" for e in entries]
    (path / EXPORT_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return entries


def read_features(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out = {}
    for line in (path / EXPORT_MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, dtype, shape, _stage = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",") if s)
        out[name] = np.fromfile(path / f"{name}.bin", dtype=np.dtype(dtype).newbyteorder("<")).reshape(dims)
    return out


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    eps: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    def __str__(self):
        lines = [f"{'group':<48} {'rel_err':>10}  n"]
        for name, err in self.errors.items():
            lines.append(f"{name:<48} {err:10.2e}  {self.checked.get(name, 0)}")
        lines.append(f"{'max':<48} {self.max_error:10.2e}  {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(lines)


def grad_check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], eps: float = 1e-6,
               tol: float = 1e-3, max_elements: int = 48, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients with central differences (f(x+eps)-f(x-eps))/2eps.

    ``fn`` is re-evaluated after perturbing ``tensors`` in place; tensor-valued
    outputs are reduced with a fixed random projection. Per group the error is
    max|analytic - numeric| / max(max|analytic|, max|numeric|, floor); the floor
    keeps groups whose true gradient is zero from dividing noise by noise. Large tensors
    are checked on a random subset of ``max_elements`` entries.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"grad_check needs float64 tensors; {name!r} is {t.dtype}")
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar():
        return (fn() * proj).sum()

    leaves = list(tensors.values())
    for t in leaves:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(scalar(), leaves, allow_unused=True)
    errors, checked = {}, {}
    with torch.no_grad():
        for (name, t), grad in zip(tensors.items(), analytic):
            grad = torch.zeros_like(t) if grad is None else grad
            flat = t.view(-1)
            n = flat.numel()
            idx = torch.arange(n) if n <= max_elements else torch.randperm(n, generator=gen)[:max_elements]
            a = grad.reshape(-1)[idx]
            num = torch.empty_like(a)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar().item()
                flat[i] = orig - eps
                fm = scalar().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * eps)
            scale = max(a.abs().max().item(), num.abs().max().item(), floor)
            errors[name] = (a - num).abs().max().item() / scale
            checked[name] = len(idx)
    return GradCheckReport(errors, tol, eps, checked)


# ---------------------------------------------------------------------------
# Parameter reports
# ---------------------------------------------------------------------------


@dataclass
class ParamReport:
    rows: list[tuple[str, int, int]]  # (group, frozen, trainable)
    n_frozen: int
    n_trainable: int

    @property
    def n_total(self) -> int:
        return self.n_frozen + self.n_trainable

    @property
    def trainable_fraction(self) -> float:
        return self.n_trainable / self.n_total

    def __str__(self):
        lines = [f"{'module':<24} {'frozen':>12} {'trainable':>12} {'total':>12}"]
        for group, fz, tr in self.rows:
            lines.append(f"{group:<24} {fz:>12,} {tr:>12,} {fz + tr:>12,}")
        lines.append(f"{'total':<24} {self.n_frozen:>12,} {self.n_trainable:>12,} {self.n_total:>12,}")
        lines.append(f"trainable fraction: {self.trainable_fraction:.4f}")
        return "\n".join(lines)


def _group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]


def param_report(model, partition) -> ParamReport:
    frozen = set(partition.theta_V)
    groups: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        g = groups.setdefault(_group(name), [0, 0])
        g[0 if name in frozen else 1] += p.numel()
    rows = [(g, fz, tr) for g, (fz, tr) in groups.items()]
    return ParamReport(rows, sum(r[1] for r in rows), sum(r[2] for r in rows))


def dry_run_report(config: ModelConfig | None = None, mode: str = "full", paradigm: str = "adapter") -> ParamReport:
    """Parameter report for a model built on the meta device (no memory for weights)."""
    from .model import UniRgbIrModel
    from .tuning import partition

    config = config or ModelConfig.vit_base()
    with torch.device("meta"):
        model = UniRgbIrModel(config, mode=mode)
    return param_report(model, partition(model, paradigm))
