"""Tiling a raster into overlapping input patches and back.

Cores are non-overlapping 128x128 tiles; each input patch adds a 4-pixel
context ring taken from neighboring pixels (mirrored at image edges), so
adjacent inputs overlap by 8 pixels while the cores tile the image exactly
once. Images not divisible by the core are mirror-padded up to the next
multiple and the padding is cropped away on reassembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError


@dataclass
class PatchSet:
    patches: np.ndarray  # (P, core+2*ring, core+2*ring, C)
    targets: np.ndarray  # (P, core, core, C)
    grid: tuple[int, int]
    offsets: list[tuple[int, int]]
    orig_size: tuple[int, int]
    core: int
    ring: int


def _pad_reflect(img: np.ndarray, pads) -> np.ndarray:
    for (a, b), axis in zip(pads, (0, 1)):
        if max(a, b) > img.shape[axis] - 1:
            raise ShapeError(
                f"image of size {img.shape[:2]} too small to mirror-pad by {(a, b)} on axis {axis}"
            )
    return np.pad(img, (pads[0], pads[1], (0, 0)), mode="reflect")


def patchify(img: np.ndarray, core: int = 128, ring: int = 4) -> PatchSet:
    """Cut (H, W, C) into core tiles plus ring-context input patches."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ShapeError(f"patchify expects (H, W, C), got {img.shape}")
    h, w, c = img.shape
    pad_h = (-h) % core
    pad_w = (-w) % core
    padded = _pad_reflect(img, ((0, pad_h), (0, pad_w))) if pad_h or pad_w else img
    ph, pw = padded.shape[:2]
    rows, cols = ph // core, pw // core
    ringed = _pad_reflect(padded, ((ring, ring), (ring, ring)))
    side = core + 2 * ring
    patches = np.empty((rows * cols, side, side, c), dtype=np.float32)
    targets = np.empty((rows * cols, core, core, c), dtype=np.float32)
    offsets = []
    idx = 0
    for r in range(rows):
        for col in range(cols):
            y, x = r * core, col * core
            patches[idx] = ringed[y : y + side, x : x + side]
            targets[idx] = padded[y : y + core, x : x + core]
            offsets.append((y, x))
            idx += 1
    return PatchSet(
        patches=patches,
        targets=targets,
        grid=(rows, cols),
        offsets=offsets,
        orig_size=(h, w),
        core=core,
        ring=ring,
    )


def unpatchify(tiles: np.ndarray, pset: PatchSet) -> np.ndarray:
    """Place core tiles back at their offsets and crop any padding."""
    tiles = np.asarray(tiles)
    rows, cols = pset.grid
    if tiles.shape[0] != rows * cols:
        raise ShapeError(f"{tiles.shape[0]} tiles do not fill a {rows}x{cols} grid")
    core = pset.core
    c = tiles.shape[3]
    out = np.empty((rows * core, cols * core, c), dtype=tiles.dtype)
    for tile, (y, x) in zip(tiles, pset.offsets):
        out[y : y + core, x : x + core] = tile
    h, w = pset.orig_size
    return out[:h, :w]
