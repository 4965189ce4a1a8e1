"""Deterministic grayscale images cut from the scikit-image sample pictures.

Train and test are non-overlapping 64x64 tiles pooled across all source
images and then split, so they share a distribution but never a pixel.
Calibration images are larger windows from the same sources placed so that
they never touch a test tile.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import data as skdata
from skimage.color import rgb2gray
from skimage.util import img_as_ubyte

CROP = 64
CALIB_SIZE = 128
SOURCES = ("camera", "coins", "moon", "text", "page", "grass", "gravel", "brick", "cell",
           "astronaut", "chelsea", "rocket", "clock", "coffee", "immunohistochemistry", "retina")
PER_SOURCE = 3
CALIB_PER_SOURCE = 2
# Crops whose 0-255 standard deviation falls below this are skipped as flat.
MIN_STD = 8.0
_ATTEMPTS = 200


@dataclass
class Dataset:
    train: np.ndarray  # (N, 1, 64, 64) float32 in [0, 1]
    test: np.ndarray
    calib_pool: np.ndarray  # (M, 1, CALIB_SIZE, CALIB_SIZE), disjoint from test

    def calibration(self, count: int = 10, seed: int = 0) -> np.ndarray:
        if not 1 <= count <= len(self.calib_pool):
            raise ValueError(f"calibration size must be in [1, {len(self.calib_pool)}]")
        idx = np.sort(np.random.default_rng(seed).permutation(len(self.calib_pool))[:count])
        return self.calib_pool[idx]


def load_gray(name: str) -> np.ndarray:
    img = getattr(skdata, name)()
    if img.ndim == 3:
        img = rgb2gray(img[..., :3])
    return img_as_ubyte(img)


def _tiles(img: np.ndarray, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Origins of up to ``count`` textured, non-overlapping tiles in random order."""
    h, w = img.shape
    cells = [(r, c) for r in range(0, h - CROP + 1, CROP) for c in range(0, w - CROP + 1, CROP)]
    out = []
    for k in rng.permutation(len(cells)):
        r, c = cells[k]
        if img[r:r + CROP, c:c + CROP].std() >= MIN_STD:
            out.append((r, c))
        if len(out) == count:
            break
    return out


def _overlaps(a: tuple[int, int], size_a: int, b: tuple[int, int], size_b: int) -> bool:
    return (a[0] < b[0] + size_b and b[0] < a[0] + size_a
            and a[1] < b[1] + size_b and b[1] < a[1] + size_a)


def _windows(img: np.ndarray, avoid: list[tuple[int, int]], count: int,
             rng: np.random.Generator) -> list[tuple[int, int]]:
    """Textured CALIB_SIZE windows on a 16-pixel lattice that miss every tile in ``avoid``."""
    h, w = img.shape
    out = []
    for _ in range(_ATTEMPTS):
        if len(out) == count:
            break
        o = (16 * int(rng.integers(0, (h - CALIB_SIZE) // 16 + 1)),
             16 * int(rng.integers(0, (w - CALIB_SIZE) // 16 + 1)))
        if any(_overlaps(o, CALIB_SIZE, t, CROP) for t in avoid):
            continue
        if any(_overlaps(o, CALIB_SIZE, p, CALIB_SIZE) for p in out):
            continue
        if img[o[0]:o[0] + CALIB_SIZE, o[1]:o[1] + CALIB_SIZE].std() >= MIN_STD:
            out.append(o)
    return out


def _cut(img: np.ndarray, origin: tuple[int, int], size: int) -> np.ndarray:
    return img[origin[0]:origin[0] + size, origin[1]:origin[1] + size]


def tile_origins(seed: int = 0) -> list[tuple[str, int, int]]:
    """(source, row, col) of every pooled tile, in pool order."""
    rng = np.random.default_rng(seed)
    return [(name, r, c) for name in SOURCES for r, c in _tiles(load_gray(name), PER_SOURCE, rng)]


def crop_pool(seed: int = 0) -> np.ndarray:
    """``PER_SOURCE`` textured tiles from every source image, (N, 64, 64) uint8."""
    images = {name: load_gray(name) for name in SOURCES}
    return np.stack([_cut(images[n], (r, c), CROP) for n, r, c in tile_origins(seed)])


def desk_dataset(n_train: int = 32, n_test: int = 8, seed: int = 0) -> Dataset:
    """32 train / 8 test crops by default, reproducible for a given seed."""
    images = {name: load_gray(name) for name in SOURCES}
    origins = tile_origins(seed)
    if n_train + n_test > len(origins):
        raise ValueError(f"at most {len(origins)} crops are available")
    order = np.random.default_rng(seed + 1).permutation(len(origins))
    test_idx = np.sort(order[n_train:n_train + n_test])
    pool = np.stack([_cut(images[n], (r, c), CROP) for n, r, c in origins])
    stack = pool.astype(np.float32)[:, None] / 255.0

    rng = np.random.default_rng(seed + 2)
    windows = []
    for name in SOURCES:
        avoid = [(origins[i][1], origins[i][2]) for i in test_idx if origins[i][0] == name]
        for o in _windows(images[name], avoid, CALIB_PER_SOURCE, rng):
            windows.append(_cut(images[name], o, CALIB_SIZE))
    calib = np.stack(windows).astype(np.float32)[:, None] / 255.0
    return Dataset(stack[np.sort(order[:n_train])], stack[test_idx], calib)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Round [0, 1] pixels to 8-bit."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
