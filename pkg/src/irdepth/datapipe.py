"""Normalisation, flip augmentation, RGB-D file I/O, synthetic scenes and colourisation.

Arrays here are plain numpy: ``rgb`` is (3, h, w) and ``depth`` is (1, h, w),
both float in [0, 1]. Files on disk are 8-bit RGB PNGs and 16-bit grayscale
PNGs.

The reversed-inferno colour table in ``data/inferno_r.txt`` was exported once
from matplotlib's ``inferno_r`` colormap (256 samples, channels rounded
half-up to 8 bits). It is read as data; nothing here evaluates the colormap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor import DimensionError

DEPTH_SCALE = 65535
RGB_SCALE = 255


class DepthDomainError(ValueError):
    pass


@dataclass(frozen=True)
class SamplePair:
    rgb: np.ndarray
    depth: np.ndarray
    depth_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DimensionError(f"rgb must be (3, h, w), got {self.rgb.shape}")
        if self.depth.ndim != 3 or self.depth.shape[0] != 1:
            raise DimensionError(f"depth must be (1, h, w), got {self.depth.shape}")
        if self.rgb.shape[1:] != self.depth.shape[1:]:
            raise DimensionError(f"rgb {self.rgb.shape} and depth {self.depth.shape} are not aligned")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.depth.shape[1], self.depth.shape[2]


@dataclass(frozen=True)
class Normalized:
    values: np.ndarray
    degenerate: bool


def minmax_normalize(x) -> Normalized:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalise an empty array")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Normalized(np.zeros_like(x), True)
    return Normalized((x - lo) / (hi - lo), False)


def hflip(pair: SamplePair) -> SamplePair:
    return replace(
        pair,
        rgb=np.ascontiguousarray(pair.rgb[:, :, ::-1]),
        depth=np.ascontiguousarray(pair.depth[:, :, ::-1]),
    )


# --------------------------------------------------------------------------
# files


def _quantize(values: np.ndarray, scale: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if np.any(~np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise DepthDomainError("values to store must lie in [0, 1]")
    # round half up
    return np.floor(v * scale + 0.5)


def save_depth(depth, path) -> None:
    d = np.asarray(depth)
    d = d.reshape(d.shape[-2:]) if d.ndim > 2 else d
    q = _quantize(d, DEPTH_SCALE).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def save_rgb(rgb, path) -> None:
    q = _quantize(rgb, RGB_SCALE).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0))).save(path, format="PNG")


def read_depth_raw(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I"):
            raise OSError(f"{path}: expected a 16-bit grayscale image, got mode {im.mode}")
        arr = np.array(im)
    if arr.dtype != np.uint16:
        if arr.min() < 0 or arr.max() > DEPTH_SCALE:
            raise OSError(f"{path}: pixel values outside the 16-bit range")
        arr = arr.astype(np.uint16)
    return arr


def load_depth(path) -> np.ndarray:
    return (read_depth_raw(path).astype(np.float64) / DEPTH_SCALE)[None]


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise OSError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
        arr = np.array(im)
    return arr.astype(np.float64).transpose(2, 0, 1) / RGB_SCALE


def load_pair(rgb_path, depth_path) -> SamplePair:
    rgb = load_rgb(rgb_path)
    depth = load_depth(depth_path)
    if rgb.shape[1:] != depth.shape[1:]:
        raise OSError(f"{rgb_path} is {rgb.shape[1:]} but {depth_path} is {depth.shape[1:]}")
    return SamplePair(rgb, depth)


def write_dataset(pairs: Sequence[SamplePair], root) -> None:
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        save_rgb(p.rgb, root / "rgb" / f"{i:04d}.png")
        save_depth(p.depth, root / "depth" / f"{i:04d}.png")


def read_dataset(root) -> List[SamplePair]:
    root = Path(root)
    rgb_files = sorted((root / "rgb").glob("*.png"))
    if not rgb_files:
        raise OSError(f"{root}: no rgb/NNNN.png files")
    pairs = []
    for f in rgb_files:
        d = root / "depth" / f.name
        if not d.exists():
            raise OSError(f"{f} has no matching depth file {d}")
        pairs.append(load_pair(f, d))
    return pairs


# --------------------------------------------------------------------------
# synthetic scenes


def synth_dataset(seed: int, count: int, h: int, w: int, k_shapes: int = 3) -> List[SamplePair]:
    """Background plane at depth 1 plus ``k_shapes`` occluding rectangles.

    Each rectangle has a depth in [0.1, 0.9] and a base colour; the RGB
    value is the base colour shaded by (1 - depth), so the background is
    black and near objects are bright.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be a positive multiple of 16")
    if k_shapes < 0:
        raise ValueError(f"k_shapes must be >= 0, got {k_shapes}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        depth = np.ones((h, w))
        rgb = np.zeros((3, h, w))
        d = rng.uniform(0.1, 0.9, k_shapes)
        colors = rng.uniform(0.3, 1.0, (k_shapes, 3))
        ys = np.sort(rng.integers(0, h + 1, (k_shapes, 2)), axis=1)
        xs = np.sort(rng.integers(0, w + 1, (k_shapes, 2)), axis=1)
        # paint far to near so nearer rectangles occlude
        for i in np.argsort(-d, kind="stable"):
            (y0, y1), (x0, x1) = ys[i], xs[i]
            y1 = max(y1, y0 + h // 8)
            x1 = max(x1, x0 + w // 8)
            depth[y0:y1, x0:x1] = d[i]
            rgb[:, y0:y1, x0:x1] = (colors[i] * (1.0 - d[i]))[:, None, None]
        pairs.append(SamplePair(rgb, depth[None], depth_range=None))
    return pairs


# --------------------------------------------------------------------------
# colourisation


@lru_cache(maxsize=None)
def load_colormap() -> np.ndarray:
    """(256, 3) uint8 reversed-inferno table; entry 0 is the bright-yellow end."""
    text = resources.files("irdepth").joinpath("data/inferno_r.txt").read_text()
    rows = np.array([line.split() for line in text.splitlines() if line.strip()], dtype=np.int64)
    if rows.shape != (256, 4) or not np.array_equal(rows[:, 0], np.arange(256)):
        raise ValueError("colormap table must have 256 rows of 'index r g b'")
    table = rows[:, 1:].astype(np.uint8)
    table.setflags(write=False)
    return table


def depth_to_color(depth, cmap: Optional[np.ndarray] = None) -> np.ndarray:
    """Map depths in [0, 1] to (h, w, 3) uint8 colours; near is yellow, far is dark."""
    cmap = load_colormap() if cmap is None else cmap
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[0]
    if np.any(~np.isfinite(d)) or d.min() < 0 or d.max() > 1:
        raise DepthDomainError("depth to colourise must lie in [0, 1]")
    idx = np.floor(d * 255 + 0.5).astype(np.intp)
    return cmap[idx]
