"""Depth samples, manifests, preprocessing and online augmentation."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats

MAX_DEPTH = 10.0
SPLITS = ("train", "val", "test")


@dataclass
class DepthSample:
    rgb: np.ndarray      # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray    # (H, W) float32 meters
    mask: np.ndarray     # (H, W) bool
    source: str = ""

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.rgb.shape[:2] != self.depth.shape or self.depth.shape != self.mask.shape:
            raise ValueError(f"{self.source or 'sample'}: rgb {self.rgb.shape[:2]}, depth "
                             f"{self.depth.shape} and mask {self.mask.shape} are not aligned")

    @property
    def size(self):
        return self.depth.shape


def load_sample(rgb_path, depth_path, meters_per_unit=None, source=None) -> DepthSample:
    rgb = formats.read_rgb(rgb_path)
    depth = formats.read_depth(depth_path, meters_per_unit)
    if rgb.shape[:2] != depth.shape:
        raise formats.FormatError(
            f"rgb {rgb_path} is {rgb.shape[1]}x{rgb.shape[0]} but depth {depth_path} is "
            f"{depth.shape[1]}x{depth.shape[0]}")
    return DepthSample(rgb, depth, depth > 0, source or str(rgb_path))


def save_sample(sample: DepthSample, rgb_path, depth_path):
    formats.write_ppm(rgb_path, sample.rgb)
    formats.write_pfm(depth_path, np.where(sample.mask, sample.depth, 0))


def downsample_pair(sample: DepthSample, factor: int) -> DepthSample:
    """Nearest-neighbour subsampling by an integer factor."""
    h, w = sample.size
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by factor {factor}")
    sl = (slice(None, None, factor), slice(None, None, factor))
    return DepthSample(sample.rgb[sl].copy(), sample.depth[sl].copy(), sample.mask[sl].copy(),
                       sample.source)


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    rgb: Path
    depth: Path
    split: str


def parse_manifest(path, val_fraction=0.1):
    """CSV with header ``rgb,depth,split``; paths relative to the manifest.

    When no row is tagged ``val``, the last ``val_fraction`` of the train rows
    are re-tagged as validation (at least one when there are two or more
    train rows).
    """
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return entries
        if [h.strip().lower() for h in header] != ["rgb", "depth", "split"]:
            raise ValueError(f"{path}: header must be 'rgb,depth,split', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rgb, depth, split = (c.strip() for c in row)
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r} (expected {SPLITS})")
            entries.append(ManifestEntry(root / rgb, root / depth, split))
    if val_fraction and not any(e.split == "val" for e in entries):
        train_idx = [i for i, e in enumerate(entries) if e.split == "train"]
        n_val = math.ceil(len(train_idx) * val_fraction) if len(train_idx) > 1 else 0
        for i in train_idx[len(train_idx) - n_val:]:
            entries[i] = replace(entries[i], split="val")
    return entries


def write_manifest(path, rows):
    """``rows`` are ``(rgb, depth, split)`` with paths relative to the manifest."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["rgb", "depth", "split"])
        for row in rows:
            writer.writerow([str(r) for r in row])


def load_split(entries, split, meters_per_unit=None, workers=1):
    """Load every entry of ``split``; result order follows the manifest."""
    chosen = [e for e in entries if e.split == split]

    def load(e):
        return load_sample(e.rgb, e.depth, meters_per_unit)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(load, chosen))
    return [load(e) for e in chosen]


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    scale: tuple = (1.0, 1.5)
    rotation: tuple = (-5.0, 5.0)
    color: tuple = (0.8, 1.2)
    flip_p: float = 0.5

    def __post_init__(self):
        if self.scale[0] < 1 or self.scale[0] > self.scale[1]:
            raise ValueError(f"scale range must lie in [1, inf), got {self.scale}")
        if not 0 <= self.flip_p <= 1:
            raise ValueError(f"flip probability must be in [0, 1], got {self.flip_p}")
        if self.rotation[0] > self.rotation[1] or self.color[0] > self.color[1]:
            raise ValueError("augmentation ranges must be (low, high)")

    @classmethod
    def identity(cls):
        return cls(scale=(1.0, 1.0), rotation=(0.0, 0.0), color=(1.0, 1.0), flip_p=0.0)


def scale_sample(sample: DepthSample, s: float, top=None, left=None) -> DepthSample:
    """Zoom by ``s`` (crop an H/s x W/s window and resize it back with nearest
    neighbours); depth is divided by ``s`` to keep geometry consistent."""
    if s == 1:
        return sample
    h, w = sample.size
    ch, cw = max(1, int(round(h / s))), max(1, int(round(w / s)))
    top = (h - ch) // 2 if top is None else top
    left = (w - cw) // 2 if left is None else left
    rows = top + np.minimum((np.arange(h) * ch) // h, ch - 1)
    cols = left + np.minimum((np.arange(w) * cw) // w, cw - 1)
    ix = np.ix_(rows, cols)
    depth = (sample.depth[ix] / s).astype(np.float32)
    return DepthSample(sample.rgb[ix], depth, sample.mask[ix], sample.source)


def rotate_sample(sample: DepthSample, degrees: float) -> DepthSample:
    if degrees == 0:
        return sample
    kw = dict(reshape=False, order=0, mode="constant", cval=0.0)
    rgb = ndimage.rotate(sample.rgb, degrees, axes=(1, 0), **kw)
    depth = ndimage.rotate(sample.depth, degrees, axes=(1, 0), **kw)
    mask = ndimage.rotate(sample.mask.astype(np.uint8), degrees, axes=(1, 0), **kw) > 0
    return DepthSample(rgb, np.where(mask, depth, 0).astype(np.float32), mask, sample.source)


def flip_sample(sample: DepthSample) -> DepthSample:
    return DepthSample(sample.rgb[:, ::-1].copy(), sample.depth[:, ::-1].copy(),
                       sample.mask[:, ::-1].copy(), sample.source)


def augment(sample: DepthSample, policy: AugmentPolicy, rng) -> DepthSample:
    """Random zoom, in-plane rotation, per-channel colour gain and horizontal
    flip, each drawn independently.  All draws happen regardless of the
    policy so the random stream does not depend on which transforms apply."""
    s = rng.uniform(*policy.scale)
    h, w = sample.size
    ch, cw = max(1, int(round(h / s))), max(1, int(round(w / s)))
    # floats, not integers(): a one-value range would consume no state
    top = min(int(rng.random() * (h - ch + 1)), h - ch)
    left = min(int(rng.random() * (w - cw + 1)), w - cw)
    angle = rng.uniform(*policy.rotation)
    gains = rng.uniform(policy.color[0], policy.color[1], size=3)
    flip = rng.random() < policy.flip_p

    out = scale_sample(sample, s, top, left)
    out = rotate_sample(out, angle)
    if np.any(gains != 1):
        out = replace(out, rgb=np.clip(out.rgb * gains.astype(np.float32), 0, 1))
    if flip:
        out = flip_sample(out)
    return out


def to_batch(samples):
    """Stack samples into NCHW image, N1HW depth and N1HW mask arrays."""
    x = np.stack([s.rgb.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    y = np.stack([s.depth[None] for s in samples]).astype(np.float32)
    m = np.stack([s.mask[None] for s in samples])
    return x, y, m
