"""Raster ingestion, the radiometric preprocessing chain, and file formats.

Formats are deliberately plain: a flat little-endian binary with a text
sidecar header (width/height/bands/dtype) for data rasters, 8-bit PPM for
quick 3-band tests, and 8-bit PGM plus a CSV legend for class maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ParamError
from .engine.checkpoint import FormatError

log = logging.getLogger(__name__)

RGB_TRUNC = 2540
NIR_SCALE = 3.937
EIGHT_BIT_DIV = 10.0


@dataclass
class RasterImage:
    """4-band (R, G, B, NIR) float32 raster scaled to [0, 1]."""

    data: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ParamError(f"raster must be (H, W, 4), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def preprocess(raw: np.ndarray, bit_depth: int = 12) -> RasterImage:
    """Digital numbers to [0, 1] reflectance-like values.

    RGB bands are truncated to 0..2540; NIR is divided by 3.937 into the
    same range; everything is scaled to 8-bit by dividing by 10 (rounded to
    nearest, half to even) and finally divided by 255.
    """
    raw = np.asarray(raw)
    if not np.issubdtype(raw.dtype, np.integer):
        raise FormatError(f"preprocess expects integer digital numbers, got dtype {raw.dtype}")
    if raw.ndim != 3 or raw.shape[2] not in (3, 4):
        raise FormatError(f"expected (H, W, 3|4) raster, got {raw.shape}")
    if raw.min() < 0:
        raise FormatError("negative digital numbers in input")
    steps = [f"input dtype={raw.dtype} shape={raw.shape} bit_depth={bit_depth}"]
    dn = raw.astype(np.float64)
    if raw.shape[2] == 3:
        log.warning("3-band input: synthesizing an all-zero NIR band")
        dn = np.concatenate([dn, np.zeros_like(dn[:, :, :1])], axis=2)
        steps.append("synthesized NIR=0 band")
    rgb = np.minimum(dn[:, :, :3], RGB_TRUNC)
    nir = dn[:, :, 3:4] / NIR_SCALE
    steps.append(f"RGB truncated to 0..{RGB_TRUNC}; NIR divided by {NIR_SCALE}")
    stacked = np.concatenate([rgb, nir], axis=2)
    eight = np.clip(np.rint(stacked / EIGHT_BIT_DIV), 0, 255)
    steps.append("scaled to 8-bit (divide by 10, round half to even)")
    out = (eight / 255.0).astype(np.float32)
    steps.append("scaled to [0, 1] (divide by 255)")
    return RasterImage(data=out, provenance=steps)


# ---------------------------------------------------------------------------
# flat binary + sidecar header


def _header_path(path) -> Path:
    return Path(str(path) + ".hdr")


def save_raster(path, data: np.ndarray, dtype: str | None = None) -> None:
    """Write a flat little-endian raster plus its text sidecar."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    if dtype is None:
        dtype = "uint16" if np.issubdtype(data.dtype, np.integer) else "float32"
    np_dtype = {"uint16": "<u2", "float32": "<f4"}.get(dtype)
    if np_dtype is None:
        raise FormatError(f"unsupported raster dtype {dtype!r}")
    h, w, bands = data.shape
    Path(path).write_bytes(np.ascontiguousarray(data.astype(np_dtype)).tobytes())
    _header_path(path).write_text(
        f"width={w}\nheight={h}\nbands={bands}\ndtype={dtype}\n", encoding="utf-8"
    )


def load_raster(path) -> np.ndarray:
    """Read a flat binary raster via its sidecar header."""
    hdr = _header_path(path)
    if not hdr.exists():
        raise FormatError(f"missing sidecar header {hdr}")
    fields = {}
    for line in hdr.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        w, h, bands = int(fields["width"]), int(fields["height"]), int(fields["bands"])
        dtype = fields["dtype"]
    except KeyError as exc:
        raise FormatError(f"{hdr}: missing header field {exc}") from exc
    np_dtype = {"uint16": "<u2", "float32": "<f4"}.get(dtype)
    if np_dtype is None:
        raise FormatError(f"{hdr}: unsupported dtype {dtype!r}")
    raw = Path(path).read_bytes()
    expect = h * w * bands * np.dtype(np_dtype).itemsize
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np_dtype).reshape(h, w, bands).copy()


# ---------------------------------------------------------------------------
# PPM / PGM


def load_ppm(path) -> RasterImage:
    """8-bit binary PPM as a quick 3-band source (NIR synthesized as 0)."""
    raw = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise FormatError(f"{path}: truncated PPM header")
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            i += 1
            continue
        if raw[i : i + 1].isspace():
            i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        tokens.append(raw[i:j])
        i = j
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    i += 1  # single whitespace after maxval
    pix = np.frombuffer(raw[i : i + h * w * 3], dtype=np.uint8)
    if pix.size != h * w * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    rgb = pix.reshape(h, w, 3).astype(np.float32) / 255.0
    log.warning("PPM input is 3-band: synthesizing an all-zero NIR band")
    data = np.concatenate([rgb, np.zeros((h, w, 1), dtype=np.float32)], axis=2)
    return RasterImage(data=data, provenance=[f"ppm {path}", "synthesized NIR=0 band"])


def save_pgm(path, labels: np.ndarray) -> None:
    """Class map as an 8-bit binary PGM."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"class map must be 2-d, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise FormatError("class labels must fit in 8 bits")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    pix = np.frombuffer(parts[3][: h * w], dtype=np.uint8)
    if pix.size != h * w:
        raise FormatError(f"{path}: truncated PGM payload")
    return pix.reshape(h, w).astype(np.int32)


def load_image(path) -> RasterImage:
    """Dispatch on extension: .ppm quick tests, else DN raster + preprocess."""
    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return load_ppm(p)
    raw = load_raster(p)
    if raw.dtype.kind == "f":
        raise FormatError(
            f"{path}: float raster supplied where integer digital numbers are required"
        )
    return preprocess(raw)
