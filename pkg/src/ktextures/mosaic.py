"""Synthetic texture mosaics with ground-truth labels for verification runs.

Each class gets one 4-band texture tile: a base color (pairwise L1 distance
>= 0.15 between classes), a two-tone blob pattern (learnable spatial
structure, the regime the method targets), and fine noise. Tiles repeat
wherever their class appears, matching the model's one-texture-per-class
premise, and blocks align with the 128-pixel patch grid.
"""

from __future__ import annotations

import numpy as np

from .engine import ParamError
from .raster import RasterImage

BASE_LO, BASE_HI = 0.2, 0.8
NOISE_AMP = 0.02
BLOB_SHIFT = 0.12


def _blob_mask(side: int, rng: np.random.Generator) -> np.ndarray:
    """Union of random disks covering roughly a third of the tile."""
    n_disks = max(6, side // 8)
    cy = rng.uniform(0, side, n_disks)
    cx = rng.uniform(0, side, n_disks)
    rad = rng.uniform(side / 16, side / 7, n_disks)
    yy, xx = np.mgrid[0:side, 0:side]
    mask = np.zeros((side, side), dtype=bool)
    for y, x, r in zip(cy, cx, rad):
        mask |= (yy - y) ** 2 + (xx - x) ** 2 < r * r
    return mask


def _class_tiles(k: int, tile: int, rng: np.random.Generator) -> np.ndarray:
    tiles = np.empty((k, tile, tile, 4), dtype=np.float32)
    span = BASE_HI - BASE_LO
    for j in range(k):
        level = BASE_LO + span * (j + 0.5) / k
        base = np.clip(level + rng.uniform(-0.03, 0.03, 4), 0.05, 0.95)
        field = np.broadcast_to(base, (tile, tile, 4)).copy()
        blob = _blob_mask(tile, rng)
        shift = rng.uniform(0.7, 1.3) * BLOB_SHIFT * rng.choice([-1.0, 1.0], 4)
        field[blob] = np.clip(field[blob] + shift, 0.02, 0.98)
        field += rng.uniform(-NOISE_AMP, NOISE_AMP, field.shape)
        tiles[j] = np.clip(field, 0.0, 1.0)
    return tiles


def synth_mosaic(k: int, tile: int, size: int, seed=0) -> tuple[RasterImage, np.ndarray]:
    """Random block mosaic of k textures; returns (image, truth labels)."""
    if k < 2:
        raise ParamError("k must be >= 2")
    if size % tile != 0:
        raise ParamError(f"size {size} not divisible by tile {tile}")
    blocks = size // tile
    n_blocks = blocks * blocks
    if n_blocks < k:
        raise ParamError(f"{n_blocks} blocks cannot host {k} classes")
    rng = np.random.default_rng(seed)
    tiles = _class_tiles(k, tile, rng)
    # Every class appears at least once.
    reps = -(-n_blocks // k)
    assignment = np.tile(np.arange(k), reps)[:n_blocks]
    rng.shuffle(assignment)
    assignment = assignment.reshape(blocks, blocks)
    img = np.empty((size, size, 4), dtype=np.float32)
    truth = np.empty((size, size), dtype=np.int32)
    for by in range(blocks):
        for bx in range(blocks):
            cls = int(assignment[by, bx])
            sly = slice(by * tile, (by + 1) * tile)
            slx = slice(bx * tile, (bx + 1) * tile)
            img[sly, slx] = tiles[cls]
            truth[sly, slx] = cls
    image = RasterImage(data=img, provenance=[f"synth_mosaic k={k} tile={tile} size={size} seed={seed}"])
    return image, truth


def class_color_distances(image_truth) -> np.ndarray:
    """Pairwise L1 distance between per-class mean colors."""
    image, truth = image_truth
    data = image.data if isinstance(image, RasterImage) else np.asarray(image)
    ks = np.unique(truth)
    means = np.stack([data[truth == j].mean(axis=0) for j in ks])
    diff = np.abs(means[:, None, :] - means[None, :, :]).sum(axis=2)
    return diff
