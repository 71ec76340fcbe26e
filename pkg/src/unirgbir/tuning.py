"""Adapter tuning: parameter partition, loss, AdamW and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import ModelConfig, TrainConfig, seed_all
from .model import UniRgbIrModel

log = logging.getLogger(__name__)

PARADIGMS = ("adapter", "full")

# Top-level parameter prefixes and the partition they fall into under the
# adapter paradigm, per model mode.
_FROZEN_PREFIXES = {
    "full": ("backbone.",),
    "mfp_add": ("backbone.",),
    "rgb": ("backbone.",),
    "baseline": ("backbone.blocks.", "backbone.norm.", "backbone.pos_embed"),
}
_TRAINABLE_PREFIXES = {
    "full": ("mfp.", "sfi.", "head."),
    "mfp_add": ("mfp.", "head."),
    "rgb": ("head.",),
    "baseline": ("backbone.patch_embed.", "head."),
}


class UnregisteredParameterError(RuntimeError):
    pass


@dataclass
class ParamPartition:
    theta_V: list[str]
    theta_A: list[str]
    sizes: dict[str, int]

    @property
    def n_frozen(self) -> int:
        return sum(self.sizes[n] for n in self.theta_V)

    @property
    def n_trainable(self) -> int:
        return sum(self.sizes[n] for n in self.theta_A)

    @property
    def n_total(self) -> int:
        return self.n_frozen + self.n_trainable

    @property
    def trainable_fraction(self) -> float:
        return self.n_trainable / self.n_total


def partition(model: UniRgbIrModel, paradigm: str = "adapter") -> ParamPartition:
    """Split parameters into frozen and trainable sets and apply the flags.

    Adapter paradigm freezes the backbone (except the patch embedding in
    baseline mode); full fine-tuning trains everything.
    """
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    frozen_pre = _FROZEN_PREFIXES[model.mode]
    train_pre = _TRAINABLE_PREFIXES[model.mode]
    theta_V, theta_A, sizes = [], [], {}
    for name, p in model.named_parameters():
        sizes[name] = p.numel()
        if name.startswith(train_pre):
            frozen = False
        elif name.startswith(frozen_pre):
            frozen = paradigm == "adapter"
        else:
            raise UnregisteredParameterError(
                f"parameter {name!r} is not registered with the partition for mode {model.mode!r}"
            )
        p.requires_grad_(not frozen)
        (theta_V if frozen else theta_A).append(name)
    return ParamPartition(theta_V, theta_A, sizes)


def compute_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy of (B, K, H, W) logits against (B, H, W) labels."""
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and gt {tuple(gt.shape)} do not match")
    k = logits.shape[1]
    if gt.numel() and (gt.min() < 0 or gt.max() >= k):
        raise ValueError(f"gt class index out of range 0..{k - 1}")
    return F.cross_entropy(logits, gt.long())


class AdamW:
    """Adam with decoupled weight decay.

    For each parameter with gradient g at step t:
        p <- p - lr * wd * p
        m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {name: {"m": torch.zeros_like(p), "v": torch.zeros_like(p)}
                      for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state[name]
            p.mul_(1 - lr * self.weight_decay)
            st["m"].mul_(b1).add_(p.grad, alpha=1 - b1)
            st["v"].mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
            denom = (st["v"] / c2).sqrt_().add_(self.eps)
            p.addcdiv_(st["m"], denom, value=-lr / c1)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then constant."""
    warmup = max(1, math.ceil(cfg.warmup_fraction * cfg.steps))
    return cfg.lr * min(1.0, (step + 1) / warmup)


@dataclass
class TrainState:
    model: UniRgbIrModel
    optimizer: AdamW
    config: TrainConfig
    generator: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)
    dump_dir: Path | None = None


def init_train_state(model: UniRgbIrModel, part: ParamPartition, cfg: TrainConfig, dump_dir=None) -> TrainState:
    params = dict(model.named_parameters())
    opt = AdamW(((n, params[n]) for n in part.theta_A), lr=cfg.lr, betas=cfg.betas,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model, opt, cfg, gen, dump_dir=Path(dump_dir) if dump_dir else None)


def _dump_nan(state: TrainState, loss: float):
    info = {"step": state.step, "loss": loss, "recent_losses": state.losses[-20:]}
    info["nonfinite_params"] = [n for n, p in state.model.named_parameters()
                                if not torch.isfinite(p).all()]
    info["nonfinite_grads"] = [n for n, p in state.model.named_parameters()
                               if p.grad is not None and not torch.isfinite(p.grad).all()]
    if state.dump_dir is not None:
        state.dump_dir.mkdir(parents=True, exist_ok=True)
        (state.dump_dir / "nan_dump.json").write_text(json.dumps(info, indent=1))
    return info


def train_step(state: TrainState, batch) -> float:
    """One optimizer step on the trainable set; returns the batch loss."""
    rgb, ir, gt = batch
    model = state.model
    model.train()
    state.optimizer.zero_grad()
    logits = model(rgb, ir) if model.uses_ir else model(rgb)
    loss = compute_loss(logits, gt)
    value = float(loss.detach())
    if not math.isfinite(value):
        info = _dump_nan(state, value)
        raise FloatingPointError(f"non-finite loss at step {state.step}: {info}")
    loss.backward()
    state.optimizer.step(lr_at(state.step, state.config))
    state.step += 1
    state.losses.append(value)
    return value


@dataclass
class TrainResult:
    model: UniRgbIrModel
    partition: ParamPartition
    losses: list[float]
    records: list[dict]


def run_training(model_config: ModelConfig, train_set, val_set=None, mode: str = "full",
                 paradigm: str = "adapter", train_config: TrainConfig | None = None,
                 pretrained: UniRgbIrModel | None = None, log_path=None, on_step=None) -> TrainResult:
    """Train a fresh model; evaluate every ``eval_interval`` steps and at the end.

    Each evaluation appends one JSON line ``{step, loss, miou, macc, mode}``
    to ``log_path``. ``loss`` is the mean training loss since the previous record.
    """
    from .data import batch_tensors
    from .evaluate import evaluate_dataset

    cfg = train_config or TrainConfig()
    seed_all(cfg.seed)
    model = UniRgbIrModel(model_config, mode=mode)
    if pretrained is not None:
        model.load_pretrained(pretrained)
    part = partition(model, paradigm)
    state = init_train_state(model, part, cfg, dump_dir=Path(log_path).parent if log_path else None)
    label = mode if paradigm == "adapter" else f"{mode}/finetune_all"
    records = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    n = len(train_set)
    try:
        last = 0
        for step in range(cfg.steps):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=state.generator).tolist()
            train_step(state, batch_tensors([train_set[i] for i in idx]))
            if on_step is not None:
                on_step(state)
            done = step + 1
            if done % cfg.eval_interval == 0 or done == cfg.steps:
                rec = {"step": done, "loss": float(np.mean(state.losses[last:done])), "mode": label}
                if val_set is not None and len(val_set):
                    scores = evaluate_dataset(model, val_set)
                    rec.update(miou=scores["miou"], macc=scores["macc"])
                else:
                    rec.update(miou=None, macc=None)
                last = done
                records.append(rec)
                log.info("step %d loss %.4f miou %s", done, rec["loss"], rec["miou"])
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model, part, state.losses, records)


def read_metric_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
