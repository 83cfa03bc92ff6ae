"""Synthetic image corpus, two-view augmentation, and dataset files.

Images are drawn from a class-conditional generative recipe: each class
owns a color slot plus a geometry template (blob count and radius for the
base recipe, ring radius and thickness for the transfer recipe), and each
sample perturbs nuisances the augmentations also touch (background level,
placement, slight color jitter). Class identity therefore survives crops,
flips, noise, and channel jitter, which is what makes a two-view
contrastive objective solvable on this corpus at all. In the base recipe
the color palette is smaller than the label set, so color pins down only
a hue group and blob geometry carries the rest of the label.

All randomness is counter-based: each (seed, index, view-slot) tuple
names its own Philox stream, so augmentation draws do not depend on batch
composition or iteration order, and resuming mid-run is exact.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import rng_from_key

__all__ = [
    "DatasetSplit",
    "Dataset",
    "AugmentationPolicy",
    "ViewPair",
    "make_synthetic_dataset",
    "save_dataset_file",
    "load_dataset_file",
    "two_views",
    "augment_batch",
    "sample_label_fraction",
    "batch_indices",
]

DATA_MAGIC = b"DISCODAT"

# Size of the blob recipe's hue palette. Class c uses palette slot c % 5;
# classes past the palette repeat a hue with different blob geometry.
_HUE_GROUPS = 5


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length must match images")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    train: DatasetSplit
    test: DatasetSplit
    num_classes: int
    recipe: str


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _class_template(num_classes: int, c: int, seed: int, recipe: str) -> dict:
    rng = rng_from_key(seed, recipe, "template", c)
    jitter = rng.uniform(0.0, 0.35)
    if recipe == "rings":
        # Offset palette and annulus geometry: disjoint from the blob recipe.
        return {
            "hue": ((c + 0.5 + jitter) / num_classes) % 1.0,
            "sat": 0.55,
            "val": 0.9,
            "count": 1 + (c % 2),
            "radius": 0.18 + 0.07 * ((c // 2) % 3),
            "thickness": 0.05 + 0.02 * (c % 3),
        }
    # Hues come from a fixed 5-color palette; classes beyond the palette
    # reuse its hues with different geometry (one wide blob against three
    # narrow ones). Color alone then identifies only the hue group, so
    # separating the full label set needs spatial structure, which is
    # where encoder capacity starts to matter.
    variant = c // _HUE_GROUPS
    return {
        "hue": (((c % _HUE_GROUPS) + jitter) / _HUE_GROUPS) % 1.0,
        "sat": 0.85,
        "val": 0.9,
        "count": 1 + 2 * variant,
        "radius": 0.16 - 0.06 * variant,
    }


def _render_sample(tpl: dict, rng: np.random.Generator, channels: int,
                   yy: np.ndarray, xx: np.ndarray, recipe: str) -> np.ndarray:
    h, w = yy.shape
    scale = min(h, w)
    img = np.empty((channels, h, w), dtype=np.float64)
    img[:] = rng.uniform(0.05, 0.3)
    img += rng.uniform(-0.05, 0.05, size=(channels, 1, 1))
    img += rng.normal(0.0, 0.03, size=(channels, h, w))
    for _ in range(tpl["count"]):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        rad = tpl["radius"] * scale * rng.uniform(0.85, 1.15)
        hue = tpl["hue"] + rng.uniform(-0.02, 0.02)
        color = _hsv(hue, tpl["sat"] * rng.uniform(0.9, 1.0),
                     tpl["val"] * rng.uniform(0.85, 1.0))
        if channels != 3:
            color = np.full(channels, color.mean())
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        if recipe == "rings":
            band = tpl["thickness"] * scale
            mask = np.exp(-((np.sqrt(dist2) - rad) ** 2) / (2.0 * band * band))
        else:
            mask = np.exp(-dist2 / (2.0 * (rad * 0.6) ** 2))
        img += mask[None] * color[:, None, None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(num_classes: int = 10, per_class: int = 500,
                           test_per_class: int = 100, height: int = 24,
                           width: int = 24, channels: int = 3, seed: int = 7,
                           recipe: str = "blobs") -> Dataset:
    """Deterministic synthetic corpus; images are uint8-quantized so the
    in-memory arrays match a file round trip exactly."""
    if recipe not in ("blobs", "rings"):
        raise ValueError(f"unknown recipe {recipe!r}")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    templates = [_class_template(num_classes, c, seed, recipe)
                 for c in range(num_classes)]

    def render_split(name: str, count: int) -> DatasetSplit:
        images = np.empty((num_classes * count, channels, height, width),
                          dtype=np.float32)
        labels = np.empty(num_classes * count, dtype=np.int64)
        pos = 0
        for c in range(num_classes):
            for i in range(count):
                rng = rng_from_key(seed, recipe, name, c, i)
                sample = _render_sample(templates[c], rng, channels, yy, xx,
                                        recipe)
                quant = np.round(sample * 255.0).astype(np.uint8)
                images[pos] = quant.astype(np.float32) / 255.0
                labels[pos] = c
                pos += 1
        return DatasetSplit(images, labels)

    return Dataset(train=render_split("train", per_class),
                   test=render_split("test", test_per_class),
                   num_classes=num_classes, recipe=recipe)


# -- dataset files -------------------------------------------------------


def save_dataset_file(path, split: DatasetSplit, num_classes: int) -> None:
    """Header magic,N,C,H,W,K (u32 LE) + uint8 images + int32 labels."""
    n, c, h, w = split.images.shape
    quant = np.round(split.images * 255.0).astype(np.uint8)
    labels = split.labels.astype("<i4")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<5I", n, c, h, w, num_classes))
        f.write(np.ascontiguousarray(quant).tobytes())
        f.write(labels.tobytes())


def load_dataset_file(path) -> tuple[DatasetSplit, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    n, c, h, w, k = struct.unpack_from("<5I", raw, 8)
    img_bytes = n * c * h * w
    expected = 28 + img_bytes + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} != expected {expected}")
    images = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=28)
    images = images.reshape(n, c, h, w).astype(np.float32) / 255.0
    labels = np.frombuffer(raw, dtype="<i4", offset=28 + img_bytes,
                           count=n).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"{path}: label outside [0, {k})")
    return DatasetSplit(images, labels), k


# -- augmentation --------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    noise_std: float = 0.02
    channel_jitter: float = 0.1
    enabled: bool = True

    @classmethod
    def from_config(cls, data_cfg: dict) -> "AugmentationPolicy":
        return cls(crop_scale_min=data_cfg["crop_scale_min"],
                   crop_scale_max=data_cfg["crop_scale_max"],
                   flip_prob=data_cfg["flip_prob"],
                   noise_std=data_cfg["noise_std"],
                   channel_jitter=data_cfg["channel_jitter"])


@dataclass
class ViewPair:
    view_q: np.ndarray
    view_k: np.ndarray
    indices: np.ndarray


def _crop_resize_batch(imgs: np.ndarray, y0: np.ndarray, x0: np.ndarray,
                       bh: np.ndarray, bw: np.ndarray) -> np.ndarray:
    """Bilinear resample of per-sample crop boxes back to the input size.

    A full-image box is an exact identity (fractional weights are all
    zero), which keeps the disabled-crop path bit-stable.
    """
    b, c, h, w = imgs.shape
    ys = y0[:, None] + (np.arange(h, dtype=np.float64) + 0.5) * (bh[:, None] / h) - 0.5
    xs = x0[:, None] + (np.arange(w, dtype=np.float64) + 0.5) * (bw[:, None] / w) - 0.5
    yf = np.floor(ys)
    xf = np.floor(xs)
    fy = ys - yf
    fx = xs - xf
    ylo = np.clip(yf.astype(np.int64), 0, h - 1)
    yhi = np.clip(yf.astype(np.int64) + 1, 0, h - 1)
    xlo = np.clip(xf.astype(np.int64), 0, w - 1)
    xhi = np.clip(xf.astype(np.int64) + 1, 0, w - 1)
    bidx = np.arange(b)[:, None]
    r0 = imgs[bidx, :, ylo, :]  # (b, h, c, w)
    r1 = imgs[bidx, :, yhi, :]
    rows = r0 + (r1 - r0) * fy[:, :, None, None]
    c0 = rows[bidx, :, :, xlo]  # (b, w, h, c)
    c1 = rows[bidx, :, :, xhi]
    cols = c0 + (c1 - c0) * fx[:, :, None, None]
    return cols.transpose(0, 3, 2, 1).astype(np.float32)


def augment_batch(images: np.ndarray, indices: np.ndarray,
                  policy: AugmentationPolicy, seed: int, slot: int
                  ) -> np.ndarray:
    """One stochastic view per selected sample.

    Draw order per sample is fixed (crop area, crop offsets, flip,
    channel gains, pixel noise), each from the stream keyed by
    (seed, index, slot).
    """
    sel = images[indices]
    if not policy.enabled:
        return sel.copy()
    b, c, h, w = sel.shape
    area = np.empty(b)
    y0 = np.empty(b)
    x0 = np.empty(b)
    flip = np.empty(b, dtype=bool)
    gains = np.empty((b, c), dtype=np.float64)
    noise = np.zeros((b, c, h, w), dtype=np.float32) if policy.noise_std > 0 \
        else None
    for j, idx in enumerate(indices):
        rng = rng_from_key(seed, "aug", int(idx), slot)
        a = rng.uniform(policy.crop_scale_min, policy.crop_scale_max)
        side = float(np.sqrt(a))
        area[j] = a
        y0[j] = rng.uniform(0.0, h * (1.0 - side))
        x0[j] = rng.uniform(0.0, w * (1.0 - side))
        flip[j] = rng.uniform() < policy.flip_prob
        gains[j] = 1.0 + policy.channel_jitter * rng.uniform(-1.0, 1.0, size=c)
        if noise is not None:
            noise[j] = rng.normal(0.0, policy.noise_std, size=(c, h, w))
    side = np.sqrt(area)
    out = _crop_resize_batch(sel, y0, x0, side * h, side * w)
    if flip.any():
        out[flip] = out[flip][..., ::-1]
    out = out * gains[:, :, None, None].astype(np.float32)
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0, out=out)


def two_views(split: DatasetSplit, indices: np.ndarray,
              policy: AugmentationPolicy, seed: int) -> ViewPair:
    """Two independently augmented views of the same samples (slots 0/1)."""
    indices = np.asarray(indices, dtype=np.int64)
    if policy.enabled:
        vq = augment_batch(split.images, indices, policy, seed, slot=0)
        vk = augment_batch(split.images, indices, policy, seed, slot=1)
    else:
        vq = split.images[indices].copy()
        vk = vq.copy()
    return ViewPair(view_q=vq, view_k=vk, indices=indices)


# -- subset and batching helpers ------------------------------------------


def sample_label_fraction(split: DatasetSplit, fraction: float,
                          seed: int) -> np.ndarray:
    """Stratified index subset: first ceil-half-up share of a per-class
    permutation, so smaller fractions nest inside larger ones at the same
    seed and every class keeps at least one sample."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    chosen = []
    for c in np.unique(split.labels):
        pool = np.flatnonzero(split.labels == c)
        take = max(1, int(np.floor(fraction * pool.size + 0.5)))
        perm = rng_from_key(seed, "label-fraction", int(c)).permutation(pool.size)
        chosen.append(pool[perm[:take]])
    return np.sort(np.concatenate(chosen))


def batch_indices(n_or_indices, batch_size: int, seed: int,
                  shuffle: bool = True) -> list[np.ndarray]:
    """Split (optionally shuffled) indices into consecutive batches; the
    final short batch is kept."""
    if isinstance(n_or_indices, (int, np.integer)):
        idx = np.arange(int(n_or_indices), dtype=np.int64)
    else:
        idx = np.asarray(n_or_indices, dtype=np.int64)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle:
        idx = idx[rng_from_key(seed, "batch-order").permutation(idx.size)]
    return [idx[i:i + batch_size] for i in range(0, idx.size, batch_size)]
