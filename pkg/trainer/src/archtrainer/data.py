"""Datasets for the trainer: a bundled synthetic digit-style set and .npz files.

The synthetic set is generated procedurally (ten 8x8 glyph classes with
random shifts and pixel noise), so tests never download anything and a seed
pins the exact data.
"""

from __future__ import annotations

import os

import numpy as np

GLYPHS = [
    "00111100 01000010 01000010 01000010 01000010 01000010 01000010 00111100",  # ring
    "00011000 00111000 00011000 00011000 00011000 00011000 00011000 01111110",  # one
    "00111100 01000010 00000010 00000100 00011000 00100000 01000000 01111110",  # two
    "01111110 00000010 00000100 00011100 00000010 00000010 01000010 00111100",  # three
    "00000100 00001100 00010100 00100100 01000100 01111110 00000100 00000100",  # four
    "01111110 01000000 01111100 00000010 00000010 00000010 01000010 00111100",  # five
    "00111100 01000000 01000000 01111100 01000010 01000010 01000010 00111100",  # six
    "01111110 00000010 00000100 00001000 00010000 00100000 00100000 00100000",  # seven
    "00111100 01000010 01000010 00111100 01000010 01000010 01000010 00111100",  # eight
    "00111100 01000010 01000010 00111110 00000010 00000010 00000010 00111100",  # nine
]


def _glyph_array(spec: str) -> np.ndarray:
    rows = spec.split()
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)


def synthetic_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(x, y): x is (n, 8, 8, 1) float, y is (n,) int labels."""
    rng = np.random.default_rng(seed)
    glyphs = [_glyph_array(spec) for spec in GLYPHS]
    x = np.zeros((n, 8, 8, 1))
    y = rng.integers(0, 10, size=n)
    for i in range(n):
        img = glyphs[y[i]]
        dx, dy = rng.integers(-1, 2, size=2)
        img = np.roll(np.roll(img, dx, axis=0), dy, axis=1)
        x[i, :, :, 0] = img + rng.normal(0.0, 0.15, size=(8, 8))
    return x, y.astype(np.int64)


def load_npz(path: str) -> tuple[np.ndarray, np.ndarray]:
    """An .npz with arrays x (N,H,W,C) and y (N,)."""
    with np.load(path) as data:
        x = np.asarray(data["x"], dtype=np.float64)
        y = np.asarray(data["y"], dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise ValueError(f"npz dataset must hold x (N,H,W,C) and y (N,), got {x.shape}, {y.shape}")
    return x, y


def load_dataset(name: str, data_dir: str | None, n: int, seed: int):
    if name == "synthetic":
        return synthetic_digits(n, seed)
    if name == "npz":
        if not data_dir:
            raise ValueError("--data-dir is required for the npz dataset")
        path = data_dir if data_dir.endswith(".npz") else os.path.join(data_dir, "data.npz")
        return load_npz(path)
    raise ValueError(f"unknown dataset {name!r}")


def split_and_standardize(x: np.ndarray, y: np.ndarray, val_fraction: float = 0.2):
    """80-20 split; per-channel standardization fit on train and validation
    together (the full available data), applied to both."""
    mean = x.mean(axis=(0, 1, 2), keepdims=True)
    std = x.std(axis=(0, 1, 2), keepdims=True)
    std[std == 0] = 1.0
    x = (x - mean) / std
    n_val = max(1, int(len(x) * val_fraction))
    return (x[:-n_val], y[:-n_val]), (x[-n_val:], y[-n_val:])


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop (pad 1), random horizontal flip, cutout (2x2)."""
    n, h, w, c = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(n):
        dy, dx = rng.integers(0, 3, size=2)
        img = padded[i, dy : dy + h, dx : dx + w, :]
        if rng.random() < 0.5:
            img = img[:, ::-1, :]
        img = img.copy()
        cy, cx = rng.integers(0, h - 1), rng.integers(0, w - 1)
        img[cy : cy + 2, cx : cx + 2, :] = 0.0
        out[i] = img
    return out
