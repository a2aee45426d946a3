"""The two-path segmentation network and its training loop.

Path one encodes each patch pixelwise (1x1 convs) into a [0,1] map, adds a
small Gaussian noise during training, and snaps the map into k binary masks
with the frozen step model. Path two generates one texture per class from a
fixed Gaussian latent through a small conv stack. Masks times textures,
summed, reconstruct the patch; the feature loss between the reconstruction
and the original drives both paths. Because the mask plateaus carry zero
gradient, class assignments move only through the steps' thin linear
strips, which the noise deliberately destabilizes: pixels settle on the
plateaus and the masks stay effectively binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import BatchNormParams, ConvParams, ParamError, Tensor
from .engine.checkpoint import FormatError, load_checkpoint, save_checkpoint
from .features import extract_features, feature_loss_from
from .masks import MaskStack, argmax_labels, binarize
from .patches import PatchSet, patchify, unpatchify
from .sigma import SigmaModel

ENC_HIDDEN = 64
GEN_WIDTH = 16
GEN_BLOCKS = 4
GEN_LEAKY = 0.2
LATENT_SIZE = 144
CORE = 128
RING = 4
HEAD_INIT_GAIN = 6.0


@dataclass
class KTexConfig:
    k: int
    epochs: int = 15000
    lr: float = 1e-3
    clip_norm: float = 1.0
    noise_sd: float = 5e-4
    patch_core: int = CORE
    patch_input: int = CORE + 2 * RING
    texture_latent: int = LATENT_SIZE
    rng_seed: int = 0
    micro_batch: int | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ParamError("k must be >= 2")
        if self.patch_input != self.patch_core + 2 * RING:
            raise ParamError("patch_input must equal patch_core + 8")


@dataclass
class TextureBank:
    """One generated texture per class, (k, 128, 128, 4) in [0, 1]."""

    textures: np.ndarray
    tensors: list | None = None  # per-class (1,128,128,4) graph tensors

    @property
    def k(self) -> int:
        return self.textures.shape[0]


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    best_loss: float = float("inf")
    best_epoch: int = -1


class _Generator:
    """Per-class texture generator: 4 conv blocks + sigmoid head on a
    frozen Gaussian latent, output center-cropped 144 -> 128."""

    def __init__(self, rng: np.random.Generator):
        self.blocks = []
        prev = 1
        for _ in range(GEN_BLOCKS):
            self.blocks.append((ConvParams.create(3, 3, prev, GEN_WIDTH, rng), BatchNormParams(GEN_WIDTH)))
            prev = GEN_WIDTH
        self.head = ConvParams.create(3, 3, GEN_WIDTH, 4, rng)

    def tensors(self):
        out = []
        for conv, bn in self.blocks:
            out += conv.tensors() + bn.tensors()
        out += self.head.tensors()
        return out

    def forward(self, latent: Tensor, training: bool) -> Tensor:
        h = latent
        for conv, bn in self.blocks:
            h = E.conv2d(h, conv, padding="same")
            h = E.bn_act(h, bn, "leaky_relu", training=training, alpha=GEN_LEAKY)
        h = E.conv2d(h, self.head, padding="same")
        h = E.sigmoid(h)
        return E.crop(h, (LATENT_SIZE - CORE) // 2)


class KTexModel:
    def __init__(self, config: KTexConfig, sigma: SigmaModel, rng: np.random.Generator):
        if not sigma.frozen:
            raise ParamError("the step model must be trained and frozen")
        if sigma.k != config.k:
            raise ParamError(f"step model k={sigma.k} != config k={config.k}")
        self.config = config
        self.sigma = sigma
        self.enc_conv1 = ConvParams.create(1, 1, 4, ENC_HIDDEN, rng)
        self.enc_bn1 = BatchNormParams(ENC_HIDDEN)
        self.enc_conv2 = ConvParams.create(1, 1, ENC_HIDDEN, ENC_HIDDEN, rng)
        self.enc_bn2 = BatchNormParams(ENC_HIDDEN)
        self.enc_head = ConvParams.create(1, 1, ENC_HIDDEN, 1, rng)
        # At plain Glorot scale the initial sigmoid map concentrates inside a
        # single 1/k bin, no pixel ever meets a step's linear strip, and no
        # gradient can reach the encoder. A wider head spreads the initial
        # map across all bins so the mask search can start.
        self.enc_head.kernel.data *= np.float32(HEAD_INIT_GAIN)
        self.generators = [_Generator(rng) for _ in range(config.k)]
        # Latents are drawn once and never updated.
        self.latents = [
            rng.standard_normal((1, LATENT_SIZE, LATENT_SIZE, 1)).astype(np.float32)
            for _ in range(config.k)
        ]

    @property
    def k(self) -> int:
        return self.config.k

    def parameters(self) -> list[Tensor]:
        out = (
            self.enc_conv1.tensors()
            + self.enc_bn1.tensors()
            + self.enc_conv2.tensors()
            + self.enc_bn2.tensors()
            + self.enc_head.tensors()
        )
        for gen in self.generators:
            out += gen.tensors()
        return out

    def generator_parameter_count(self) -> int:
        return sum(int(t.size) for t in self.generators[0].tensors())

    # -- forward pieces ------------------------------------------------------

    def encode(self, patch, training: bool = False) -> Tensor:
        """Pixelwise encoder: (N,136,136,4) -> sigmoid map (N,128,128,1)."""
        t = patch if isinstance(patch, Tensor) else Tensor(patch)
        n, h, w, c = t.data.shape
        if h != self.config.patch_input or w != self.config.patch_input:
            raise E.ShapeError(
                f"encode expects {self.config.patch_input}x{self.config.patch_input} input, got {t.data.shape}"
            )
        x = E.conv2d(t, self.enc_conv1, padding="same")
        x = E.bn_act(x, self.enc_bn1, "elu", training=training)
        x = E.conv2d(x, self.enc_conv2, padding="same")
        x = E.bn_act(x, self.enc_bn2, "elu", training=training)
        x = E.conv2d(x, self.enc_head, padding="same")
        x = E.sigmoid(x)
        return E.crop(x, RING)

    def bn_params(self):
        out = [self.enc_bn1, self.enc_bn2]
        for gen in self.generators:
            out += [bn for _, bn in gen.blocks]
        return out

    def recalibrate_bn(self, patches: np.ndarray) -> None:
        """Re-anchor running statistics with one clean full-batch pass.

        Keeps inference (running-stat) behavior aligned with the batch-stat
        behavior training optimized, even after short runs where the
        momentum-0.99 estimates still lag.
        """
        saved = [(bn, bn.momentum) for bn in self.bn_params()]
        try:
            for bn, _ in saved:
                bn.momentum = 1e-12
            self.encode(Tensor(np.asarray(patches, dtype=np.float32)), training=True)
            self.generate_textures(training=True)
        finally:
            for bn, mom in saved:
                bn.momentum = mom

    def generate_textures(self, training: bool = False) -> TextureBank:
        tensors = [
            gen.forward(Tensor(lat), training) for gen, lat in zip(self.generators, self.latents)
        ]
        data = np.concatenate([t.data for t in tensors], axis=0)
        return TextureBank(textures=data, tensors=tensors)

    def forward(self, patch, training: bool = False, rng=None) -> dict:
        """Full pass: returns {"sim", "masks", "source"}."""
        source = self.encode(patch, training=training)
        if training and self.config.noise_sd > 0:
            source = E.gaussian_noise(source, self.config.noise_sd, rng, training=True)
        stack = binarize(source, self.sigma, self.k)
        bank = self.generate_textures(training=training)
        sim = compose(stack, bank)
        return {"sim": sim, "masks": stack, "source": source}

    # -- persistence ----------------------------------------------------------

    def _tensor_dict(self) -> dict:
        out = {
            "enc.conv1.kernel": self.enc_conv1.kernel.data,
            "enc.conv1.bias": self.enc_conv1.bias.data,
            "enc.bn1.gamma": self.enc_bn1.gamma.data,
            "enc.bn1.beta": self.enc_bn1.beta.data,
            "enc.bn1.running_mean": self.enc_bn1.running_mean,
            "enc.bn1.running_var": self.enc_bn1.running_var,
            "enc.conv2.kernel": self.enc_conv2.kernel.data,
            "enc.conv2.bias": self.enc_conv2.bias.data,
            "enc.bn2.gamma": self.enc_bn2.gamma.data,
            "enc.bn2.beta": self.enc_bn2.beta.data,
            "enc.bn2.running_mean": self.enc_bn2.running_mean,
            "enc.bn2.running_var": self.enc_bn2.running_var,
            "enc.head.kernel": self.enc_head.kernel.data,
            "enc.head.bias": self.enc_head.bias.data,
        }
        for ci, gen in enumerate(self.generators):
            for bi, (conv, bn) in enumerate(gen.blocks):
                out[f"gen{ci}.b{bi}.kernel"] = conv.kernel.data
                out[f"gen{ci}.b{bi}.bias"] = conv.bias.data
                out[f"gen{ci}.b{bi}.gamma"] = bn.gamma.data
                out[f"gen{ci}.b{bi}.beta"] = bn.beta.data
                out[f"gen{ci}.b{bi}.running_mean"] = bn.running_mean
                out[f"gen{ci}.b{bi}.running_var"] = bn.running_var
            out[f"gen{ci}.head.kernel"] = gen.head.kernel.data
            out[f"gen{ci}.head.bias"] = gen.head.bias.data
            out[f"gen{ci}.latent"] = self.latents[ci].reshape(-1)
        for name, arr in self.sigma._tensor_dict().items():
            out[f"sigma.{name}"] = arr
        return out

    def snapshot(self) -> dict:
        return {name: arr.copy() for name, arr in self._tensor_dict().items()}

    def restore(self, snap: dict) -> None:
        self._load_tensors(snap)

    def _load_tensors(self, tensors: dict) -> None:
        own = self._tensor_dict()
        for name, arr in tensors.items():
            if name.startswith("sigma."):
                continue
            if name not in own:
                raise FormatError(f"unknown tensor {name!r} in checkpoint")
            dst = own[name]
            if dst.shape != arr.reshape(dst.shape).shape:
                raise FormatError(f"shape mismatch for tensor {name!r}")
            dst[...] = arr.reshape(dst.shape)

    def save(self, path) -> None:
        meta = {
            "kind": "ktextures",
            "k": str(self.k),
            "noise_sd": repr(self.config.noise_sd),
            "lr": repr(self.config.lr),
            "clip_norm": repr(self.config.clip_norm),
            "epochs": str(self.config.epochs),
            "rng_seed": str(self.config.rng_seed),
            "sigma_passed": str(int(self.sigma.passed)),
            "sigma_dropout": repr(self.sigma.dropout_rate),
            "sigma_tolerance": repr(self.sigma.spec.tolerance),
        }
        save_checkpoint(path, self._tensor_dict(), meta)

    @classmethod
    def load(cls, path) -> "KTexModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "ktextures":
            raise FormatError(f"{path}: not a k-textures checkpoint")
        k = int(meta["k"])
        from .sigma import SigmaSpec  # deferred to keep import graph simple

        sig = SigmaModel(
            SigmaSpec.for_k(k, tolerance=float(meta.get("sigma_tolerance", "0.0001"))),
            np.random.default_rng(0),
            dropout_rate=float(meta.get("sigma_dropout", "0.2")),
        )
        sig_tensors = {
            name[len("sigma.") :]: arr for name, arr in tensors.items() if name.startswith("sigma.")
        }
        for name, arr in sig_tensors.items():
            part, _, leaf = name.partition(".")
            obj = getattr(sig, part)
            if leaf in ("kernel", "bias", "gamma", "beta"):
                getattr(obj, leaf).data = arr.copy()
            else:
                setattr(obj, leaf, arr.copy())
        sig.passed = meta.get("sigma_passed", "0") == "1"
        sig.freeze()
        cfg = KTexConfig(
            k=k,
            epochs=int(meta.get("epochs", "0") or 0),
            lr=float(meta.get("lr", "0.001")),
            clip_norm=float(meta.get("clip_norm", "1.0")),
            noise_sd=float(meta.get("noise_sd", "0.0005")),
            rng_seed=int(meta.get("rng_seed", "0")),
        )
        model = cls(cfg, sig, np.random.default_rng(0))
        model._load_tensors(tensors)
        for ci in range(k):
            model.latents[ci] = (
                tensors[f"gen{ci}.latent"].reshape(1, LATENT_SIZE, LATENT_SIZE, 1).copy()
            )
        return model


def build_ktex(config: KTexConfig, sigma: SigmaModel, rng_seed=None) -> KTexModel:
    seed = config.rng_seed if rng_seed is None else rng_seed
    return KTexModel(config, sigma, np.random.default_rng(seed))


def compose(stack: MaskStack, bank: TextureBank):
    """sum_i mask_i * texture_i, masks broadcast across the 4 bands."""
    if stack.k != bank.k:
        raise ParamError(f"mask k={stack.k} != texture bank k={bank.k}")
    if isinstance(stack.masks, Tensor) and bank.tensors is not None:
        textures = _drop_unit_axis(E.stack(bank.tensors, axis=0))
        return E.mask_compose(stack.masks, textures)
    masks = stack.data()
    return np.einsum("nhwk,khwc->nhwc", masks, bank.textures).astype(np.float32)


def _drop_unit_axis(stacked: Tensor) -> Tensor:
    # (k, 1, H, W, C) from stacking per-class (1, H, W, C) tensors -> (k, H, W, C)
    from .engine.tensor import make_result

    data = stacked.data.reshape((stacked.data.shape[0],) + stacked.data.shape[2:])

    def bk(g, accum):
        accum(stacked, g.reshape(stacked.data.shape))

    return make_result(data, (stacked,), bk)


def train_ktex(model: KTexModel, patches, targets, extractors, config: KTexConfig | None = None,
               dump_path=None, log_every: int = 0) -> TrainHistory:
    """One Adam step per epoch over the full patch set; keeps best weights.

    `targets` must be the center crops of the same image the patches came
    from. On a non-finite loss the best checkpoint so far is dumped to
    `dump_path` (when given) and the run aborts.
    """
    cfg = config or model.config
    patches = np.asarray(patches, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if patches.shape[0] != targets.shape[0]:
        raise ParamError("patches and targets must align")
    params = model.parameters()
    opt = E.Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.rng_seed, 0xA5])
    orig_feats = extract_features(extractors, targets)
    history = TrainHistory()
    best_snap = None
    total = patches.shape[0]
    per = cfg.micro_batch or total

    for epoch in range(cfg.epochs):
        E.zero_grads(params)
        epoch_loss = 0.0
        noise_rng = np.random.default_rng([cfg.rng_seed, 0xE9, epoch])
        for start in range(0, total, per):
            stop = min(start + per, total)
            out = model.forward(Tensor(patches[start:stop]), training=True, rng=noise_rng)
            feats = [f[start:stop] for f in orig_feats]
            weight = (stop - start) / total
            loss = feature_loss_from(feats, out["sim"], extractors)
            if weight != 1.0:
                loss = E.mul(loss, Tensor(np.float32(weight)))
            val = loss.item()
            if not np.isfinite(val):
                if dump_path is not None and best_snap is not None:
                    save_checkpoint(dump_path, best_snap, {"kind": "ktextures-partial"})
                raise E.OptimError(f"non-finite loss at epoch {epoch}")
            E.backward(loss)
            epoch_loss += val
        opt.step(params)
        history.losses.append(epoch_loss)
        if epoch_loss < history.best_loss:
            history.best_loss = epoch_loss
            history.best_epoch = epoch
            best_snap = model.snapshot()
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_loss:.6f} best {history.best_loss:.6f}")
    if best_snap is not None:
        model.restore(best_snap)
    model.recalibrate_bn(patches)
    return history


def predict_full(model: KTexModel, image, chunk: int = 64) -> dict:
    """Tile a full raster, run inference, and reassemble labels and sim.

    Returns {"class_map": ndarray (H,W) int32, "sim_image": ndarray (H,W,4),
    "actual_k": int, "census": BinarityCensus, "patch_set": PatchSet}.
    """
    from .masks import binarity_census

    arr = image if isinstance(image, np.ndarray) else image.data
    pset = patchify(arr, core=model.config.patch_core, ring=RING)
    n = pset.patches.shape[0]
    label_tiles = np.empty((n, CORE, CORE, 1), dtype=np.float32)
    sim_tiles = np.empty((n, CORE, CORE, 4), dtype=np.float32)
    n_zero = n_one = n_total = 0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        out = model.forward(Tensor(pset.patches[start:stop]), training=False)
        masks = out["masks"].data()
        labels = argmax_labels(masks)
        label_tiles[start:stop, :, :, 0] = labels
        sim_tiles[start:stop] = out["sim"].data
        n_total += masks.size
        n_zero += int(np.count_nonzero(np.abs(masks) <= 1e-6))
        n_one += int(np.count_nonzero(np.abs(masks - 1.0) <= 1e-6))
    from .masks import BinarityCensus

    nb = n_total - n_zero - n_one
    census = BinarityCensus(n_zero, n_one, nb, n_total, 100.0 * nb / n_total if n_total else 0.0)
    class_map = unpatchify(label_tiles, pset)[:, :, 0].astype(np.int32)
    sim_image = unpatchify(sim_tiles, pset)
    actual = int(np.unique(class_map).size)
    return {
        "class_map": class_map,
        "sim_image": sim_image,
        "actual_k": actual,
        "census": census,
        "patch_set": pset,
    }
