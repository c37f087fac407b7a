"""Conditional image-to-image GAN: U-Net generator, patch discriminator, L1 + adversarial loss.

Networks are plain ``torch.nn`` modules.  Everything that leaves this module
(checkpoints, predictions) is numpy so the rest of the package stays torch-free.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .projection import ChannelMode, RasterImage, from_model_range, to_model_range

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"L2CK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 2
    output_channels: int = 3
    base_filters: int = 64
    depth: int = 6
    dropout: float = 0.5

    def __post_init__(self):
        if self.input_channels not in (1, 2):
            raise ValueError("generator input must have 1 or 2 channels")
        if self.depth < 4:
            raise ValueError("depth must be >= 4")
        if self.base_filters < 1:
            raise ValueError("base_filters must be positive")

    @property
    def image_size(self) -> int:
        return 2 ** self.depth

    def widths(self) -> list[int]:
        return [min(self.base_filters * 2 ** k, self.base_filters * 8) for k in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Patch discriminator over the concatenated (condition, image) pair.

    ``n_downsampling`` stride-2 convolutions are followed by two stride-1 4x4
    convolutions with one pixel of padding, so the patch map has side
    ``S / 2**n_downsampling - 2``.
    """

    input_channels: int = 5
    base_filters: int = 64
    n_downsampling: int = 3

    def __post_init__(self):
        if self.n_downsampling < 1:
            raise ValueError("need at least one stride-2 layer")

    @classmethod
    def for_image(cls, input_channels: int, image_size: int, base_filters: int = 64) -> "DiscriminatorConfig":
        # the standard three stride-2 layers leave nothing to classify below 32 px
        n_down = 3 if image_size >= 32 else max(1, int(math.log2(image_size)) - 3)
        return cls(input_channels, base_filters, n_down)

    def patch_side(self, image_size: int) -> int:
        return image_size // 2 ** self.n_downsampling - 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 1
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    lambda_l1: float = 100.0
    seed: int = 0
    mode: ChannelMode = ChannelMode.REFLECTANCE_DISTANCE
    base_filters: int = 64

    def __post_init__(self):
        object.__setattr__(self, "mode", ChannelMode.parse(self.mode))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


PRESETS = {
    "exp1": TrainConfig(epochs=50, batch_size=1, mode=ChannelMode.REFLECTANCE),
    "exp2": TrainConfig(epochs=40, batch_size=1, mode=ChannelMode.REFLECTANCE_DISTANCE),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# --- networks ---------------------------------------------------------------

class UNetGenerator(nn.Module):
    """Encoder/decoder with a skip connection between every mirrored level."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.config = cfg
        ch = cfg.widths()
        d = cfg.depth
        self.down = nn.ModuleList()
        for k in range(d):
            cin = cfg.input_channels if k == 0 else ch[k - 1]
            layers: list[nn.Module] = [] if k == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(cin, ch[k], 4, 2, 1))
            if 0 < k < d - 1:
                layers.append(nn.InstanceNorm2d(ch[k]))
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        for k in reversed(range(d)):
            cin = ch[k] if k == d - 1 else 2 * ch[k]
            cout = cfg.output_channels if k == 0 else ch[k - 1]
            layers = [nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, 2, 1)]
            if k == 0:
                layers.append(nn.Tanh())
            else:
                layers.append(nn.InstanceNorm2d(cout))
                # the widest levels just outside the bottleneck get dropout
                if ch[k] == ch[-1] and max(1, d - 4) <= k < d - 1 and cfg.dropout > 0:
                    layers.append(nn.Dropout(cfg.dropout))
            self.up.append(nn.Sequential(*layers))

    def forward(self, x):
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = layer(x)
            if skips:
                x = torch.cat([x, skips.pop()], dim=1)
        return x


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.config = cfg
        b = cfg.base_filters
        layers: list[nn.Module] = [nn.Conv2d(cfg.input_channels, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        width = b
        for k in range(1, cfg.n_downsampling):
            nxt = b * min(2 ** k, 8)
            layers += [nn.Conv2d(width, nxt, 4, 2, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2)]
            width = nxt
        nxt = b * min(2 ** cfg.n_downsampling, 8)
        layers += [nn.Conv2d(width, nxt, 4, 1, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2),
                   nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x, y):
        return self.model(torch.cat([x, y], dim=1))


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            nn.init.zeros_(m.bias)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def generator_forward(net: UNetGenerator, x):
    """Run the generator on a (C, S, S) or (N, C, S, S) input in [-1, 1]."""
    x = _as_batch(x)
    cfg = net.config
    if x.shape[1] != cfg.input_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"generator expects {cfg.input_channels}x{cfg.image_size}x{cfg.image_size}, "
                         f"got {tuple(x.shape[1:])}")
    return net(x)


def discriminator_forward(net: PatchDiscriminator, x, y):
    x, y = _as_batch(x), _as_batch(y)
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"condition {tuple(x.shape)} and candidate {tuple(y.shape)} are not aligned")
    if x.shape[1] + y.shape[1] != net.config.input_channels:
        raise ValueError(f"discriminator expects {net.config.input_channels} channels in total, "
                         f"got {x.shape[1]} + {y.shape[1]}")
    return net(x, y)


def _as_batch(x) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = torch.from_numpy(np.asarray(x, dtype=np.float32))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected a 3- or 4-d image tensor, got {x.dim()} dims")
    return x


# --- losses -----------------------------------------------------------------

def _t(v):
    return v if torch.is_tensor(v) else torch.as_tensor(np.asarray(v, dtype=np.float64))


def bce_logits(logits, label: float):
    logits = _t(logits)
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, label))


def generator_loss(d_out_on_fake, fake, target, lambda_l1: float):
    """Non-saturating adversarial term plus ``lambda_l1`` times the mean absolute error."""
    return bce_logits(d_out_on_fake, 1.0) + lambda_l1 * torch.mean(torch.abs(_t(fake) - _t(target)))


def discriminator_loss(d_on_real, d_on_fake):
    return 0.5 * (bce_logits(d_on_real, 1.0) + bce_logits(d_on_fake, 0.0))


# --- checkpoints ------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    epoch: int = 0
    val_l1: float = float("nan")

    @property
    def mode(self) -> ChannelMode:
        return ChannelMode.REFLECTANCE if self.generator_config.input_channels == 1 else ChannelMode.REFLECTANCE_DISTANCE

    @property
    def image_size(self) -> int:
        return self.generator_config.image_size

    @classmethod
    def capture(cls, gen: UNetGenerator, disc: PatchDiscriminator, epoch: int, val_l1: float) -> "Checkpoint":
        return cls(gen.config, disc.config, _state(gen), _state(disc), epoch, float(val_l1))

    def build_generator(self) -> UNetGenerator:
        net = UNetGenerator(self.generator_config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.generator.items()})
        return net.eval()

    def build_discriminator(self) -> PatchDiscriminator:
        net = PatchDiscriminator(self.discriminator_config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.discriminator.items()})
        return net.eval()

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        same_val = (self.val_l1 == other.val_l1) or (math.isnan(self.val_l1) and math.isnan(other.val_l1))
        return (self.generator_config == other.generator_config
                and self.discriminator_config == other.discriminator_config
                and self.epoch == other.epoch and same_val
                and _same_tensors(self.generator, other.generator)
                and _same_tensors(self.discriminator, other.discriminator))


def _state(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in net.state_dict().items()}


def _same_tensors(a, b) -> bool:
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def _config_text(ck: Checkpoint) -> str:
    g, d = ck.generator_config, ck.discriminator_config
    lines = [f"gen.input_channels={g.input_channels}", f"gen.output_channels={g.output_channels}",
             f"gen.base_filters={g.base_filters}", f"gen.depth={g.depth}", f"gen.dropout={g.dropout!r}",
             f"disc.input_channels={d.input_channels}", f"disc.base_filters={d.base_filters}",
             f"disc.n_downsampling={d.n_downsampling}", f"epoch={ck.epoch}", f"val_l1={ck.val_l1!r}"]
    return "\n".join(lines)


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write the ``L2CK`` container: header, key=value config block, named float32 tensors."""
    cfg = _config_text(ck).encode()
    tensors = [(f"generator.{k}", v) for k, v in ck.generator.items()]
    tensors += [(f"discriminator.{k}", v) for k, v in ck.discriminator.items()]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic, version, cfg_len = struct.unpack("<4sHI", take(10))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    kv = dict(line.split("=", 1) for line in take(cfg_len).decode().splitlines())
    try:
        gcfg = GeneratorConfig(int(kv["gen.input_channels"]), int(kv["gen.output_channels"]),
                               int(kv["gen.base_filters"]), int(kv["gen.depth"]), float(kv["gen.dropout"]))
        dcfg = DiscriminatorConfig(int(kv["disc.input_channels"]), int(kv["disc.base_filters"]),
                                   int(kv["disc.n_downsampling"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block ({exc})") from exc
    (count,) = struct.unpack("<I", take(4))
    gen, disc = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        group, _, key = name.partition(".")
        if group == "generator":
            gen[key] = arr
        elif group == "discriminator":
            disc[key] = arr
        else:
            raise CheckpointFormatError(f"{path}: unknown tensor group in {name!r}")
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(gcfg, dcfg, gen, disc, int(kv["epoch"]), float(kv["val_l1"]))


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    d_loss: float
    g_loss: float
    g_l1: float
    val_l1: float


@dataclass
class TrainResult:
    initial: Checkpoint
    final: Checkpoint
    best: Checkpoint
    history: list[EpochStats] = field(default_factory=list)


def write_epoch_log(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "d_loss", "g_loss", "g_l1", "val_l1"])
        for s in history:
            w.writerow([s.epoch, repr(s.d_loss), repr(s.g_loss), repr(s.g_l1), repr(s.val_l1)])


def _stack(images: Sequence[RasterImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([to_model_range(im) for im in images]).astype(np.float32))


def _validate_pairs(pairs, mode: ChannelMode | None):
    if not pairs:
        raise ValueError("training set is empty")
    x0, y0 = pairs[0]
    for i, (x, y) in enumerate(pairs):
        if x.data.shape != x0.data.shape or y.data.shape != y0.data.shape:
            raise ValueError(f"pair {i} has shape {x.data.shape}/{y.data.shape}, "
                             f"expected {x0.data.shape}/{y0.data.shape}")
    if y0.channels != 3:
        raise ValueError("targets must be RGB")
    if x0.height != x0.width or x0.data.shape[1:] != y0.data.shape[1:]:
        raise ValueError("inputs and targets must be square and of equal size")
    if mode is not None and x0.channels != mode.channels:
        raise ValueError(f"inputs have {x0.channels} channel(s) but mode {mode.value} needs {mode.channels}")


def mean_l1(gen: UNetGenerator, xs: torch.Tensor, ys: torch.Tensor) -> float:
    """Mean absolute error in model range, evaluated without dropout."""
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        err = [torch.mean(torch.abs(gen(xs[i:i + 1]) - ys[i:i + 1])).item() for i in range(xs.shape[0])]
    gen.train(was_training)
    return math.fsum(err) / len(err)


def build_models(cfg: TrainConfig, image_size: int):
    depth = int(round(math.log2(image_size)))
    if 2 ** depth != image_size:
        raise ValueError(f"image size {image_size} is not a power of two")
    gcfg = GeneratorConfig(cfg.mode.channels, 3, cfg.base_filters, depth)
    dcfg = DiscriminatorConfig.for_image(cfg.mode.channels + 3, image_size, cfg.base_filters)
    torch.manual_seed(cfg.seed)
    gen, disc = UNetGenerator(gcfg), PatchDiscriminator(dcfg)
    init_weights(gen)
    init_weights(disc)
    return gen, disc


def train(pairs: Sequence[tuple[RasterImage, RasterImage]], cfg: TrainConfig,
          val_pairs: Sequence[tuple[RasterImage, RasterImage]] = (),
          on_epoch: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Alternate one discriminator and one generator Adam step per sample.

    Sample order is reshuffled every epoch from ``cfg.seed``.  The checkpoint
    with the lowest validation L1 is kept as ``best``; without a validation
    set ``best`` is the last epoch.
    """
    pairs = list(pairs)
    val_pairs = list(val_pairs)
    _validate_pairs(pairs, cfg.mode)
    if val_pairs:
        _validate_pairs(val_pairs + pairs[:1], cfg.mode)
    size = pairs[0][0].width
    gen, disc = build_models(cfg, size)
    xs, ys = _stack([p[0] for p in pairs]), _stack([p[1] for p in pairs])
    vx = _stack([p[0] for p in val_pairs]) if val_pairs else None
    vy = _stack([p[1] for p in val_pairs]) if val_pairs else None

    def validate() -> float:
        return mean_l1(gen, vx, vy) if vx is not None else float("nan")

    initial = Checkpoint.capture(gen, disc, 0, validate())
    result = TrainResult(initial, initial, initial)
    if cfg.epochs == 0:
        return result

    betas = (cfg.adam_beta1, 0.999)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=betas)
    order_rng = np.random.default_rng(cfg.seed)
    gen.train()
    disc.train()
    best_val = math.inf
    for epoch in range(1, cfg.epochs + 1):
        d_sum, g_sum, l1_sum = [], [], []
        for step, i in enumerate(order_rng.permutation(len(pairs))):
            x, y = xs[i:i + 1], ys[i:i + 1]
            fake = gen(x)

            disc.requires_grad_(True)
            opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(disc(x, y), disc(x, fake.detach()))
            d_loss.backward()
            opt_d.step()

            disc.requires_grad_(False)
            opt_g.zero_grad(set_to_none=True)
            l1 = torch.mean(torch.abs(fake - y))
            g_loss = bce_logits(disc(x, fake), 1.0) + cfg.lambda_l1 * l1
            g_loss.backward()
            opt_g.step()

            dl, gl = d_loss.item(), g_loss.item()
            if not (math.isfinite(dl) and math.isfinite(gl)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} (sample {int(i)}): "
                                    f"d_loss={dl}, g_loss={gl}")
            d_sum.append(dl)
            g_sum.append(gl)
            l1_sum.append(l1.item())
        disc.requires_grad_(True)
        val = validate()
        n = len(d_sum)
        stats = EpochStats(epoch, math.fsum(d_sum) / n, math.fsum(g_sum) / n, math.fsum(l1_sum) / n, val)
        result.history.append(stats)
        logger.info("epoch %d: d_loss=%.4f g_loss=%.4f g_l1=%.4f val_l1=%.4f",
                    epoch, stats.d_loss, stats.g_loss, stats.g_l1, stats.val_l1)
        if on_epoch is not None:
            on_epoch(stats)
        snap = None
        if vx is not None and val < best_val:
            best_val = val
            snap = Checkpoint.capture(gen, disc, epoch, val)
            result.best = snap
        if epoch == cfg.epochs:
            result.final = snap if snap is not None else Checkpoint.capture(gen, disc, epoch, val)
    if vx is None:
        result.best = result.final
    return result


# --- inference --------------------------------------------------------------

def predict_many(checkpoint: Checkpoint, rasters: Sequence[RasterImage]) -> list[RasterImage]:
    gen = checkpoint.build_generator()
    size = checkpoint.image_size
    out = []
    with torch.no_grad():
        for r in rasters:
            if r.channels != checkpoint.generator_config.input_channels or r.width != size or r.height != size:
                raise ValueError(f"checkpoint expects {checkpoint.generator_config.input_channels}x{size}x{size} "
                                 f"({checkpoint.mode.value}), got {r.channels}x{r.height}x{r.width}")
            y = gen(torch.from_numpy(to_model_range(r)).unsqueeze(0))[0].numpy()
            out.append(from_model_range(y))
    return out


def predict(checkpoint: Checkpoint, raster: RasterImage) -> RasterImage:
    """Deterministic RGB prediction in [0, 1] (dropout off)."""
    return predict_many(checkpoint, [raster])[0]
