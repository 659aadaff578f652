"""Synthetic registration pairs with known displacement and injected nuisances.

The source image is smooth random texture with a bright annulus standing in
for the myocardium. The target is the source warped by a smooth random field
plus sensor noise, after which a few disks are overwritten so that those
pixels have no counterpart in the source.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .field_core import warp_bilinear, warp_nearest
from .ingestion import (
    KIND_FIELD, KIND_IMAGE, KIND_MASK, FormatError, read_grid, write_grid,
)

NUISANCE_KINDS = ("noise-fill", "constant-fill")
PLACEMENTS = ("ring", "uniform")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    tex_sigma: float = 2.0
    amplitude: float = 6.0
    def_sigma: float = 8.0
    nuisance_count: int = 2
    nuisance_radius: int = 6
    nuisance_kind: str = "noise-fill"
    nuisance_placement: str = "ring"
    fill_value: float = 0.0
    noise: float = 0.02
    radial: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"size must be >= 8, got {self.size}")
        if not (0 <= self.amplitude < self.size / 4):
            raise ValueError(f"amplitude must lie in [0, size/4), got {self.amplitude}")
        if not (0 <= self.nuisance_radius < self.size / 4):
            raise ValueError(f"nuisance radius must lie in [0, size/4), got {self.nuisance_radius}")
        if self.nuisance_count < 0:
            raise ValueError("nuisance count must be >= 0")
        if self.nuisance_kind not in NUISANCE_KINDS:
            raise ValueError(f"nuisance kind must be one of {NUISANCE_KINDS}")
        if self.nuisance_placement not in PLACEMENTS:
            raise ValueError(f"nuisance placement must be one of {PLACEMENTS}")
        if not (0.0 <= self.fill_value <= 1.0) or self.noise < 0 or self.tex_sigma < 0:
            raise ValueError("fill value must lie in [0, 1]; noise and blur must be >= 0")


@dataclass
class SynthPair:
    src: np.ndarray
    tgt: np.ndarray
    u_gt: np.ndarray
    mask_s: np.ndarray
    mask_t: np.ndarray
    nuisance: np.ndarray
    seed: int = 0
    pair_id: str = ""


def blur(grid, sigma):
    """Separable Gaussian blur, kernel truncated at 3 sigma, replicate boundary."""
    if sigma <= 0:
        return np.asarray(grid, dtype=np.float64)
    return gaussian_filter(grid, sigma, mode="nearest", truncate=3.0)


def smooth_noise(rng, n, sigma):
    """Blurred white noise, generated on a margin-padded canvas and cropped.

    The margin keeps the replicate boundary of the blur from piling noise
    up at the image border.
    """
    pad = int(np.ceil(3 * sigma))
    noise = rng.normal(size=(n + 2 * pad, n + 2 * pad))
    return blur(noise, sigma)[pad:pad + n, pad:pad + n]


def _normalize(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _disk(n, cy, cx, radius):
    rows, cols = np.mgrid[0:n, 0:n]
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2


def generate_pair(cfg):
    n = cfg.size
    rng = np.random.default_rng(cfg.seed)

    tex = _normalize(smooth_noise(rng, n, cfg.tex_sigma))
    center = (n - 1) / 2 + rng.uniform(-n / 16, n / 16, size=2)
    outer = n / 3
    inner = outer - n / 8
    rows, cols = np.mgrid[0:n, 0:n]
    radius = np.hypot(rows - center[0], cols - center[1])
    mask_s = (radius <= outer) & (radius >= inner)
    soft = blur(mask_s.astype(np.float64), 1.0)
    src = np.clip((0.15 + 0.35 * tex) * (1.0 - soft) + (0.75 + 0.2 * tex) * soft, 0.0, 1.0)

    if cfg.radial:
        raw = np.stack([cols - center[1], rows - center[0]]).astype(np.float64)
    else:
        raw = np.stack([smooth_noise(rng, n, cfg.def_sigma) for _ in range(2)])
    peak = np.sqrt((raw**2).sum(axis=0)).max()
    u_gt = raw * (cfg.amplitude / peak) if peak > 0 and cfg.amplitude > 0 else np.zeros_like(raw)

    tgt = warp_bilinear(src, u_gt)
    if cfg.noise > 0:
        eps = np.clip(rng.normal(scale=cfg.noise, size=(n, n)), -4 * cfg.noise, 4 * cfg.noise)
        tgt = np.clip(tgt + eps, 0.0, 1.0)
    mask_t = warp_nearest(mask_s, u_gt)

    nuisance = np.zeros((n, n), dtype=bool)
    r = cfg.nuisance_radius
    for _ in range(cfg.nuisance_count):
        if cfg.nuisance_placement == "ring" and mask_t.any():
            cy, cx = np.argwhere(mask_t)[rng.integers(mask_t.sum())]
        else:
            cy, cx = rng.integers(r, n - r, size=2)
        nuisance |= _disk(n, cy, cx, r)
    if nuisance.any():
        tgt = tgt.copy()
        if cfg.nuisance_kind == "noise-fill":
            tgt[nuisance] = rng.random(int(nuisance.sum()))
        else:
            tgt[nuisance] = cfg.fill_value
    return SynthPair(src, tgt, u_gt, mask_s, mask_t, nuisance, seed=cfg.seed)


def split_sizes(count, ratios=(0.6, 0.2, 0.2)):
    if count < 3:
        raise ValueError(f"dataset needs at least 3 pairs, got {count}")
    total = sum(ratios)
    n_train = int(round(count * ratios[0] / total))
    n_val = int(round(count * ratios[1] / total))
    n_test = count - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split {ratios} of {count} pairs leaves an empty split")
    return n_train, n_val, n_test


def generate_dataset(cfg, count, ratios=(0.6, 0.2, 0.2)):
    """Pairs ``0..count-1`` with seeds ``cfg.seed + i``, split in index order.

    Returns a dict with keys ``train``, ``val`` and ``test``.
    """
    n_train, n_val, _ = split_sizes(count, ratios)
    pairs = []
    for i in range(count):
        pair = generate_pair(replace(cfg, seed=cfg.seed + i))
        pair.pair_id = f"pair{i:04d}"
        pairs.append(pair)
    return {
        "train": pairs[:n_train],
        "val": pairs[n_train:n_train + n_val],
        "test": pairs[n_train + n_val:],
    }


_FILES = (
    ("src", KIND_IMAGE), ("tgt", KIND_IMAGE), ("u_gt", KIND_FIELD),
    ("mask_s", KIND_MASK), ("mask_t", KIND_MASK), ("nuisance", KIND_MASK),
)
MANIFEST = "manifest.txt"


def save_dataset(root, splits):
    """Write every pair as ``<root>/pairs/<id>/<field>.adcs`` plus a manifest."""
    root = Path(root)
    lines = ["# pair_id split seed"]
    for split in ("train", "val", "test"):
        for pair in splits.get(split, []):
            d = root / "pairs" / pair.pair_id
            d.mkdir(parents=True, exist_ok=True)
            for name, kind in _FILES:
                write_grid(d / f"{name}.adcs", getattr(pair, name), kind)
            lines.append(f"{pair.pair_id} {split} {pair.seed}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(root):
    root = Path(root)
    manifest = root / MANIFEST
    splits = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in splits:
            raise FormatError(f"{manifest}:{lineno}: expected '<pair_id> <train|val|test> <seed>'")
        pair_id, split, seed = parts
        d = root / "pairs" / pair_id
        arrays = {name: read_grid(d / f"{name}.adcs", expect=kind) for name, kind in _FILES}
        splits[split].append(SynthPair(**arrays, seed=int(seed), pair_id=pair_id))
    return splits
