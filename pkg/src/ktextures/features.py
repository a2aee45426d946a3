"""Frozen convolutional feature extractors and the feature-space loss.

The reconstruction loss compares deep features of the original and the
simulated patch: sum over extractors of MSE(features(orig), features(sim)).
Extractors are fixed-weight conv stacks (random-seeded by default, loadable
from checkpoints), so the loss surface never moves during training.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import ConvParams, ParamError, Tensor
from .engine.checkpoint import FormatError, load_checkpoint, save_checkpoint

LEAKY_ALPHA = 0.2


class FeatureExtractor:
    """Frozen stack of 3x3 convs with leaky-relu and stride-2 reductions."""

    def __init__(self, ident: str, layers: list[ConvParams], strides: list[int], in_ch: int):
        if len(layers) != len(strides):
            raise ParamError("layers and strides must align")
        self.id = ident
        self.layers = layers
        self.strides = list(strides)
        self.in_ch = in_ch
        for p in layers:
            p.kernel.requires_grad = False
            p.bias.requires_grad = False
            p.kernel.grad = None
            p.bias.grad = None

    @property
    def widths(self) -> list[int]:
        return [p.kernel.data.shape[3] for p in self.layers]

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        for s in self.strides:
            h, w = -(-h // s), -(-w // s)
        return h, w, self.widths[-1]

    def extract(self, x) -> Tensor:
        """Features of an NHWC batch; plain arrays stay graph-free."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        for p, s in zip(self.layers, self.strides):
            t = E.conv2d(t, p, padding="same", stride=s)
            t = E.leaky_relu(t, alpha=LEAKY_ALPHA)
        return t

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for p in self.layers:
            out.append(p.kernel.data)
            out.append(p.bias.data)
        return out

    def save(self, path) -> None:
        tensors = {}
        for i, p in enumerate(self.layers):
            tensors[f"layer{i}.kernel"] = p.kernel.data
            tensors[f"layer{i}.bias"] = p.bias.data
        meta = {
            "kind": "extractor",
            "id": self.id,
            "in_ch": str(self.in_ch),
            "widths": ",".join(str(w) for w in self.widths),
            "strides": ",".join(str(s) for s in self.strides),
        }
        save_checkpoint(path, tensors, meta)


class IdentityExtractor:
    """Pixel-space passthrough for unit tests (not part of the method)."""

    id = "identity"

    def extract(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x)

    def parameter_arrays(self):
        return []


def build_random_extractor(
    seed,
    depth: int = 4,
    widths=(32, 64, 128, 256),
    downsamples: int = 3,
    in_ch: int = 4,
) -> FeatureExtractor:
    """Glorot-initialized frozen extractor; the trailing `downsamples`
    layers use stride 2 (default: 128x128x4 -> 16x16x256)."""
    if depth < 1:
        raise ParamError("depth must be >= 1")
    widths = list(widths)
    if len(widths) != depth:
        raise ParamError(f"widths {widths} must have length depth={depth}")
    if downsamples > depth:
        raise ParamError("downsamples cannot exceed depth")
    rng = E.as_generator(seed)
    layers = []
    strides = []
    prev = in_ch
    for i, w in enumerate(widths):
        layers.append(ConvParams.create(3, 3, prev, w, rng))
        strides.append(2 if i >= depth - downsamples else 1)
        prev = w
    ident = f"random-{seed}" if isinstance(seed, int) else "random"
    return FeatureExtractor(ident, layers, strides, in_ch)


def load_extractor(path) -> FeatureExtractor:
    """Rebuild an extractor from its checkpoint, validating the manifest."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "extractor":
        raise FormatError(f"{path}: not an extractor checkpoint")
    in_ch = int(meta["in_ch"])
    widths = [int(w) for w in meta["widths"].split(",")]
    strides = [int(s) for s in meta["strides"].split(",")]
    layers = []
    prev = in_ch
    for i, w in enumerate(widths):
        kname, bname = f"layer{i}.kernel", f"layer{i}.bias"
        if kname not in tensors or bname not in tensors:
            raise FormatError(f"{path}: missing tensor {kname!r}")
        kern, bias = tensors[kname], tensors[bname]
        if kern.shape != (3, 3, prev, w):
            raise FormatError(
                f"{path}: manifest mismatch for tensor {kname!r}: "
                f"expected (3, 3, {prev}, {w}), found {kern.shape}"
            )
        if bias.shape != (w,):
            raise FormatError(f"{path}: manifest mismatch for tensor {bname!r}")
        layers.append(ConvParams(kern, bias))
        prev = w
    return FeatureExtractor(meta.get("id", "loaded"), layers, strides, in_ch)


def extract_features(extractors, x) -> list[np.ndarray]:
    """Graph-free features of a plain array under every extractor."""
    arr = np.asarray(x, dtype=np.float32)
    return [ex.extract(arr).data for ex in extractors]


def feature_loss_from(orig_features, sim: Tensor, extractors) -> Tensor:
    """Sum of feature MSEs against precomputed original-image features."""
    if not extractors:
        raise ParamError("at least one extractor is required")
    total = None
    for feats, ex in zip(orig_features, extractors):
        term = E.mse(ex.extract(sim), Tensor(feats))
        total = term if total is None else E.add(total, term)
    return total


def feature_loss(orig, sim, extractors) -> Tensor:
    """Sum over extractors of MSE between orig and sim features.

    Gradients flow only through `sim`; the original image is treated as a
    constant.
    """
    orig_arr = orig.data if isinstance(orig, Tensor) else np.asarray(orig, dtype=np.float32)
    sim_t = sim if isinstance(sim, Tensor) else Tensor(sim)
    return feature_loss_from(extract_features(extractors, orig_arr), sim_t, extractors)
