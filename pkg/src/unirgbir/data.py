"""Synthetic paired RGB-IR segmentation data and its on-disk PNG layout.

Classes: 0 background, 1 visible only in RGB, 2 visible only in IR,
3 visible in both. Class-2 objects are painted with the background colour in
RGB, so an RGB-only model cannot recover them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import ImagePair

N_CLASSES = 4
CLASS_NAMES = ("background", "rgb_only", "ir_only", "both")
MIN_FRACTION, MAX_FRACTION = 0.01, 0.20
_PALETTE = [0, 0, 0, 220, 60, 40, 250, 200, 40, 60, 120, 230]


class DatasetError(Exception):
    pass


class DatasetValidationError(DatasetError):
    pass


@dataclass(frozen=True)
class SegSample:
    pair: ImagePair
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.shape != self.pair.rgb.shape[:2]:
            raise DatasetValidationError(f"mask {mask.shape} does not match image {self.pair.rgb.shape[:2]}")
        if mask.size and (mask.min() < 0 or mask.max() >= N_CLASSES):
            raise DatasetValidationError(f"mask values outside 0..{N_CLASSES - 1}")
        object.__setattr__(self, "mask", mask.astype(np.int64))


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255) / 255).astype(np.float32)


def _shape_mask(rng, h, w):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = rng.integers(h // 20, h // 8 + 1)
    rx = rng.integers(w // 20, w // 8 + 1)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return (np.abs(yy + 0.5 - cy) <= ry) & (np.abs(xx + 0.5 - cx) <= rx)
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _paint(rng, h, w):
    bg_rgb = rng.uniform(0.3, 0.55, size=3)
    bg_ir = rng.uniform(0.1, 0.25)
    rgb = np.broadcast_to(bg_rgb, (h, w, 3)).copy()
    ir = np.full((h, w), bg_ir)
    mask = np.zeros((h, w), dtype=np.int64)
    objects = [cls for cls in (1, 2, 3) for _ in range(rng.integers(1, 5))]
    rng.shuffle(objects)
    for cls in objects:
        region = _shape_mask(rng, h, w)
        hot = rng.uniform(0.7, 0.9)
        if cls == 1:
            rgb[region] = np.array([0.85, 0.2, 0.15]) + rng.uniform(-0.08, 0.08, 3)
            ir[region] = bg_ir
        elif cls == 2:
            rgb[region] = bg_rgb
            ir[region] = hot
        else:
            rgb[region] = np.array([0.15, 0.35, 0.85]) + rng.uniform(-0.08, 0.08, 3)
            ir[region] = hot
        mask[region] = cls
    return rgb, ir, mask


def class_fractions(mask: np.ndarray) -> np.ndarray:
    return np.bincount(mask.ravel(), minlength=N_CLASSES) / mask.size


def generate_sample(seed: int, index: int, height: int, width: int, noise_sigma: float = 0.02) -> SegSample:
    """Sample ``index`` of the dataset for ``seed``; independent of other indices."""
    rng = np.random.default_rng([seed, index])
    while True:
        rgb, ir, mask = _paint(rng, height, width)
        frac = class_fractions(mask)[1:]
        if np.all(frac >= MIN_FRACTION) and np.all(frac <= MAX_FRACTION):
            break
    rgb = _quantize(rgb + rng.normal(0, noise_sigma, rgb.shape))
    ir = _quantize(ir + rng.normal(0, noise_sigma, ir.shape))
    return SegSample(ImagePair(rgb, ir[..., None]), mask)


def generate(seed: int, n_samples: int, height: int = 128, width: int = 128,
             noise_sigma: float = 0.02) -> list[SegSample]:
    if height <= 0 or width <= 0 or height % 32 or width % 32:
        raise ValueError(f"image size {height}x{width} must be a positive multiple of 32")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    return [generate_sample(seed, i, height, width, noise_sigma) for i in range(n_samples)]


def audit_visibility(sample: SegSample) -> dict:
    """Class-2 contrast against background in each modality (absolute mean difference)."""
    bg = sample.mask == 0
    obj = sample.mask == 2
    rgb, ir = sample.pair.rgb, sample.pair.ir[..., 0]
    return {
        "rgb_contrast": float(np.abs(rgb[obj].mean(axis=0) - rgb[bg].mean(axis=0)).mean()),
        "ir_contrast": float(abs(ir[obj].mean() - ir[bg].mean())),
    }


def split(dataset, train_fraction: float = 0.8):
    """Fixed split by sample index: first 80% train, rest validation."""
    k = int(round(len(dataset) * train_fraction))
    return dataset[:k], dataset[k:]


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(x * 255).astype(np.uint8)


def write_dataset(dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, sample in enumerate(dataset):
        sid = f"{i:04d}"
        Image.fromarray(_to_u8(sample.pair.rgb), mode="RGB").save(directory / f"rgb_{sid}.png")
        Image.fromarray(_to_u8(sample.pair.ir[..., 0]), mode="L").save(directory / f"ir_{sid}.png")
        m = Image.fromarray(sample.mask.astype(np.uint8), mode="P")
        m.putpalette(_PALETTE)
        m.save(directory / f"mask_{sid}.png")
        ids.append(sid)
    (directory / "index.txt").write_text("".join(f"{s}\n" for s in ids), encoding="utf-8")


def read_sample(directory, sid: str) -> SegSample:
    directory = Path(directory)
    arrays = {}
    for kind in ("rgb", "ir", "mask"):
        path = directory / f"{kind}_{sid}.png"
        if not path.exists():
            raise DatasetError(f"sample {sid}: missing file {path.name}")
        try:
            with Image.open(path) as img:
                arrays[kind] = np.array(img)
        except OSError as exc:
            raise DatasetError(f"sample {sid}: unreadable {path.name}: {exc}") from exc
    mask = arrays["mask"].astype(np.int64)
    if mask.ndim != 2 or mask.min() < 0 or mask.max() >= N_CLASSES:
        raise DatasetValidationError(f"sample {sid}: mask values outside 0..{N_CLASSES - 1}")
    rgb = arrays["rgb"].astype(np.float32) / 255
    ir = arrays["ir"].astype(np.float32)[..., None] / 255
    try:
        return SegSample(ImagePair(rgb, ir), mask)
    except ValueError as exc:
        raise DatasetValidationError(f"sample {sid}: {exc}") from exc


def read_dataset(directory) -> list[SegSample]:
    directory = Path(directory)
    index = directory / "index.txt"
    if not index.exists():
        raise DatasetError(f"no index.txt in {directory}")
    ids = [line.strip() for line in index.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [read_sample(directory, sid) for sid in ids]


def batch_tensors(samples) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (B,3,H,W) rgb, (B,1,H,W) ir and (B,H,W) int64 masks."""
    rgb = torch.from_numpy(np.stack([s.pair.rgb.transpose(2, 0, 1) for s in samples]))
    ir = torch.from_numpy(np.stack([s.pair.ir.transpose(2, 0, 1) for s in samples]))
    mask = torch.from_numpy(np.stack([s.mask for s in samples]))
    return rgb, ir, mask


def iterate_batches(dataset, batch_size: int, shuffle: bool = False, seed: int = 0):
    order = np.arange(len(dataset))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield batch_tensors([dataset[i] for i in order[start:start + batch_size]])
