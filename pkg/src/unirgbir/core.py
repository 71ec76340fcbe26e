"""Shared domain types, configuration, seeding and the checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

ATTENTION_KINDS = ("deformable", "global")
RESERVED_ATTENTION_KINDS = ("pale",)
MODEL_MODES = ("full", "mfp_add", "baseline", "rgb")

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
CHECKPOINT_FORMAT = "unirgbir-checkpoint/1"


class CheckpointError(Exception):
    """Base class for checkpoint loading failures."""


class CorruptManifestError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImagePair:
    """Aligned RGB (H x W x 3) and IR (H x W x 1) images with values in [0, 1]."""

    rgb: np.ndarray
    ir: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        ir = np.asarray(self.ir)
        if ir.ndim == 2:
            ir = ir[..., None]
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H x W x 3, got {rgb.shape}")
        if ir.ndim != 3 or ir.shape[2] != 1:
            raise ValueError(f"ir must be H x W x 1, got {ir.shape}")
        if rgb.shape[:2] != ir.shape[:2]:
            raise ValueError(f"rgb {rgb.shape[:2]} and ir {ir.shape[:2]} sizes differ")
        h, w = rgb.shape[:2]
        if h % 32 or w % 32 or h == 0 or w == 0:
            raise ValueError(f"image size {h}x{w} must be a positive multiple of 32")
        for name, arr in (("rgb", rgb), ("ir", ir)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
                raise ValueError(f"{name} values must be finite and within [0, 1]")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "ir", ir)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def to_tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (1 x 3 x H x W, 1 x 1 x H x W) tensors."""
        rgb = torch.from_numpy(np.ascontiguousarray(self.rgb.transpose(2, 0, 1)))
        ir = torch.from_numpy(np.ascontiguousarray(self.ir.transpose(2, 0, 1)))
        return rgb[None].to(dtype), ir[None].to(dtype)


def flatten_grid(x: torch.Tensor) -> torch.Tensor:
    """(..., D, h, w) feature map -> (..., h*w, D) tokens, row-major."""
    return x.flatten(-2).transpose(-1, -2)


def unflatten_grid(tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """(..., h*w, D) tokens -> (..., D, h, w) feature map."""
    if tokens.shape[-2] != grid_h * grid_w:
        raise ValueError(f"{tokens.shape[-2]} tokens do not fill a {grid_h}x{grid_w} grid")
    return tokens.transpose(-1, -2).unflatten(-1, (grid_h, grid_w))


@dataclass
class TokenMap:
    """n x D tokens (optionally with leading batch dims) laid out on a grid."""

    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.tokens.shape[-2]} != {self.grid_h}*{self.grid_w}"
            )

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @classmethod
    def from_map(cls, x: torch.Tensor) -> "TokenMap":
        return cls(flatten_grid(x), x.shape[-2], x.shape[-1])

    def to_map(self) -> torch.Tensor:
        return unflatten_grid(self.tokens, self.grid_h, self.grid_w)

    def with_tokens(self, tokens: torch.Tensor) -> "TokenMap":
        return TokenMap(tokens, self.grid_h, self.grid_w)


@dataclass
class MultiScaleTokens:
    """Flattened pyramid levels concatenated in 1/8, 1/16, 1/32 order."""

    tokens: torch.Tensor
    levels: list[tuple[int, int]]
    level_offsets: list[int] = field(default_factory=list)

    def __post_init__(self):
        offsets, start = [], 0
        for h, w in self.levels:
            offsets.append(start)
            start += h * w
        if self.tokens.shape[-2] != start:
            raise ValueError(f"token count {self.tokens.shape[-2]} != level total {start}")
        if self.level_offsets and list(self.level_offsets) != offsets:
            raise ValueError("level_offsets inconsistent with levels")
        self.level_offsets = offsets

    @property
    def n_total(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @classmethod
    def from_maps(cls, maps: Sequence[torch.Tensor]) -> "MultiScaleTokens":
        levels = [(m.shape[-2], m.shape[-1]) for m in maps]
        return cls(torch.cat([flatten_grid(m) for m in maps], dim=-2), levels)

    def level_tokens(self, index: int) -> torch.Tensor:
        h, w = self.levels[index]
        start = self.level_offsets[index]
        return self.tokens[..., start:start + h * w, :]

    def level_map(self, index: int) -> torch.Tensor:
        h, w = self.levels[index]
        return unflatten_grid(self.level_tokens(index), h, w)

    def with_tokens(self, tokens: torch.Tensor) -> "MultiScaleTokens":
        return MultiScaleTokens(tokens, list(self.levels))


def mfp_token_count(height: int, width: int) -> int:
    return height * width // 64 + height * width // 256 + height * width // 1024


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    dim: int = 192
    stem_channels: int = 64
    vit_blocks: int = 12
    vit_heads: int = 4
    mlp_ratio: float = 4.0
    n_stages: int = 4
    sfi_stages: tuple[int, ...] = (1, 2, 3)
    attention_kind: str = "deformable"
    deform_points: int = 4
    deform_heads: int = 4
    patch_size: int = 16
    se_reduction: int = 4
    head_classes: int = 4
    injection_scale_init: float = 0.0
    image_size: int = 128

    def __post_init__(self):
        self.sfi_stages = tuple(sorted({int(s) for s in self.sfi_stages}))
        self.validate()

    def validate(self):
        if self.stem_channels % 4:
            raise ValueError(f"stem_channels={self.stem_channels} must be divisible by 4")
        if self.vit_blocks % self.n_stages:
            raise ValueError(f"vit_blocks={self.vit_blocks} not divisible by n_stages={self.n_stages}")
        if any(s < 1 or s > self.n_stages for s in self.sfi_stages):
            raise ValueError(f"sfi_stages {self.sfi_stages} not within 1..{self.n_stages}")
        if self.attention_kind in RESERVED_ATTENTION_KINDS:
            raise NotImplementedError(
                f"attention_kind={self.attention_kind!r} is reserved, unimplemented"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention_kind {self.attention_kind!r}")
        if self.dim % self.vit_heads or self.dim % self.deform_heads:
            raise ValueError("dim must be divisible by vit_heads and deform_heads")
        if self.image_size % 32:
            raise ValueError(f"image_size={self.image_size} must be a multiple of 32")

    @property
    def blocks_per_stage(self) -> int:
        return self.vit_blocks // self.n_stages

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sfi_stages"] = list(self.sfi_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def vit_base(cls, **changes) -> "ModelConfig":
        """ViT-Base geometry, used for parameter counting only."""
        base = dict(dim=768, vit_blocks=12, vit_heads=12, deform_heads=12, image_size=224)
        base.update(changes)
        return cls(**base)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    eval_interval: int = 250
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip("\"'")


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value) + ("," if len(value) == 1 else "")
    return str(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


RUN_PREFIX = "run."


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat ``key = value`` file holding model and training keys.

    Keys under ``run.`` describe how a snapshot was produced and are ignored
    here, so a resolved snapshot is itself a valid config file.
    """
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values = {k: v for k, v in values.items() if not k.startswith(RUN_PREFIX)}
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "sfi_stages" in values and not isinstance(values["sfi_stages"], tuple):
        values["sfi_stages"] = (values["sfi_stages"],)
    model = ModelConfig(**{k: v for k, v in values.items() if k in model_keys})
    train = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    return model, train


def load_run_keys(path) -> dict:
    """The ``run.`` entries of a snapshot, prefix stripped, values as written."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith(RUN_PREFIX) and "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()[len(RUN_PREFIX):]] = value.strip()
    return out


def dump_config_text(*sections: dict) -> str:
    lines = []
    for section in sections:
        for key, value in section.items():
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_config_file(path, model: ModelConfig, train: TrainConfig | None = None, extra=None):
    sections = [model.to_dict()]
    if train is not None:
        sections.append(train.to_dict())
    if extra:
        sections.append({f"{RUN_PREFIX}{k}": v for k, v in extra.items()})
    Path(path).write_text(dump_config_text(*sections), encoding="utf-8")


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

_current_seed: int | None = None


def seed_all(seed: int) -> None:
    """Seed python, numpy and torch so init and data generation are reproducible."""
    global _current_seed
    _current_seed = int(seed)
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def current_seed() -> int | None:
    return _current_seed


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {t.dtype}")
    return name


def save_checkpoint(model, path, seed: int | None = None, extra: dict | None = None) -> None:
    """Write ``manifest.json`` + ``weights.bin`` into directory ``path``.

    Parameters and buffers are stored in ``state_dict`` order. Each parameter
    carries its frozen flag (``requires_grad`` off).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    entries, offset = [], 0
    with open(path / WEIGHTS_NAME, "wb") as fh:
        for name, tensor in model.state_dict(keep_vars=True).items():
            data = tensor.detach().cpu().contiguous()
            dtype = _dtype_name(data)
            raw = data.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
            fh.write(raw)
            entry = {
                "name": name,
                "shape": list(data.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(raw),
                "kind": "parameter" if name in params else "buffer",
            }
            if name in params:
                entry["frozen"] = not params[name].requires_grad
            entries.append(entry)
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "mode": model.mode,
        "seed": current_seed() if seed is None else seed,
        "extra": extra or {},
        "tensors": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {MANIFEST_NAME} in {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifestError(f"corrupt manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptManifestError(f"corrupt manifest in {path}: bad format tag")
    required = {"name", "shape", "dtype", "offset", "nbytes"}
    tensors = manifest.get("tensors")
    if not isinstance(tensors, list) or "config" not in manifest:
        raise CorruptManifestError(f"corrupt manifest in {path}: missing fields")
    for entry in tensors:
        if not isinstance(entry, dict) or not required <= set(entry) or entry["dtype"] not in _DTYPES:
            raise CorruptManifestError(f"corrupt manifest in {path}: bad entry {entry!r}")
    return manifest


def load_state_into(model, path) -> dict:
    """Load tensors and frozen flags from ``path`` into an existing model."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / WEIGHTS_NAME).read_bytes()
    by_name = {}
    for entry in manifest["tensors"]:
        if entry["name"] in by_name:
            raise CorruptManifestError(f"tensor {entry['name']!r} listed twice")
        by_name[entry["name"]] = entry
    params = dict(model.named_parameters())
    state = model.state_dict(keep_vars=True)
    for name, target in state.items():
        entry = by_name.get(name)
        if entry is None:
            raise MissingTensorError(f"missing tensor {name!r} in {path}")
        if tuple(entry["shape"]) != tuple(target.shape):
            raise ShapeMismatchError(
                f"shape mismatch for tensor {name!r}: checkpoint {tuple(entry['shape'])} "
                f"vs model {tuple(target.shape)}"
            )
        start, nbytes = entry["offset"], entry["nbytes"]
        if start < 0 or start + nbytes > len(blob):
            raise CorruptManifestError(f"tensor {name!r} lies outside {WEIGHTS_NAME}")
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(blob, dtype=np_dtype, count=nbytes // np.dtype(np_dtype).itemsize,
                            offset=start).reshape(entry["shape"])
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr.copy()).to(torch_dtype))
        if name in params and "frozen" in entry:
            params[name].requires_grad_(not entry["frozen"])
    extra = set(by_name) - set(state)
    if extra:
        raise CorruptManifestError(f"checkpoint has tensors unknown to the model: {sorted(extra)}")
    return manifest


def load_checkpoint(path, config: ModelConfig | None = None):
    """Rebuild a model from a checkpoint directory.

    ``config`` overrides the stored configuration; a mismatching geometry then
    raises :class:`ShapeMismatchError` naming the first offending tensor.
    """
    from .model import UniRgbIrModel

    manifest = read_manifest(path)
    try:
        stored = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CorruptManifestError(f"bad config in manifest: {exc}") from exc
    model = UniRgbIrModel(config or stored, mode=manifest.get("mode", "full"))
    load_state_into(model, path)
    return model


def checkpoint_paths(path) -> tuple[str, str]:
    return os.path.join(path, MANIFEST_NAME), os.path.join(path, WEIGHTS_NAME)
