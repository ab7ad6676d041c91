"""Dual-encoder U-Net generator and conditional patch discriminator.

Tensors are channel-first, ``(N, C, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, StageError

ENCODER_WIDTH_MULT = (1, 2, 4, 8, 8, 8, 8, 8)
DISC_WIDTH_MULT = (1, 2, 4, 8)
MAX_DEPTH = 8


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    in_channels_appearance: int = 3
    in_channels_composition: int = 8
    out_channels: int = 1
    base_width: int = 64
    depth: int | None = None
    norm: str = "instance"
    stage: str = "one"

    def __post_init__(self):
        if self.depth is None:
            object.__setattr__(self, "depth", min(int(math.log2(self.image_size)), MAX_DEPTH))
        self.validate()

    def validate(self):
        size = self.image_size
        if size < 32 or size & (size - 1):
            raise ConfigError(f"image_size must be a power of two >= 32, got {size}")
        if not 3 <= self.depth <= min(MAX_DEPTH, int(math.log2(size))):
            raise ConfigError(f"depth {self.depth} invalid for image_size {size}")
        if self.out_channels not in (1, 3):
            raise ConfigError(f"out_channels must be 1 or 3, got {self.out_channels}")
        if self.stage not in ("one", "two"):
            raise ConfigError(f"stage must be 'one' or 'two', got {self.stage!r}")
        if self.norm != "instance":
            raise ConfigError(f"unsupported norm {self.norm!r}")
        if self.base_width < 1 or self.in_channels_appearance < 1 or self.in_channels_composition < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def appearance_channels(self) -> int:
        """Channels fed to the appearance encoder (photo, plus the initial output in stage two)."""
        extra = self.out_channels if self.stage == "two" else 0
        return self.in_channels_appearance + extra

    @property
    def discriminator_channels(self) -> int:
        return self.appearance_channels + self.in_channels_composition + self.out_channels

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_width * m for m in ENCODER_WIDTH_MULT[: self.depth]]

    def to_dict(self) -> dict:
        return asdict(self)


def _down(cin, cout, *, first, norm):
    layers = [] if first else [nn.LeakyReLU(0.2)]
    layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    return nn.Sequential(*layers)


def _up(cin, cout, *, norm):
    layers = [nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        widths = cfg.encoder_widths
        blocks = []
        cin = in_channels
        for i, w in enumerate(widths):
            # instance norm over a 1x1 map is identically zero, so the innermost
            # block at full depth stays unnormalized
            out_size = cfg.image_size >> (i + 1)
            blocks.append(_down(cin, w, first=i == 0, norm=i > 0 and out_size > 1))
            cin = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class Generator(nn.Module):
    """U-shaped generator with separate appearance and composition encoders.

    Bottleneck features of both encoders are concatenated; every decoder level
    also receives the matching-level features of both encoders.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.appearance = Encoder(cfg.appearance_channels, cfg)
        self.composition = Encoder(cfg.in_channels_composition, cfg)
        widths = cfg.encoder_widths
        depth = cfg.depth
        ups = []
        # decoder level k produces features at encoder level k-1 resolution
        for k in range(depth - 1, 0, -1):
            cin = 2 * widths[k] if k == depth - 1 else 3 * widths[k]
            ups.append(_up(cin, widths[k - 1], norm=True))
        self.ups = nn.ModuleList(ups)
        self.head = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(3 * widths[0], cfg.out_channels, 4, stride=2, padding=1),
            nn.Tanh(),
        )

    def forward(self, photo, masks, initial=None):
        if (initial is not None) != (self.cfg.stage == "two"):
            if initial is None:
                raise StageError("stage-two generator requires the initial portrait")
            raise StageError("stage-one generator does not accept an initial portrait")
        size = self.cfg.image_size
        if photo.shape[-2:] != (size, size) or masks.shape[-2:] != (size, size):
            raise StageError(
                f"expected {size}x{size} inputs, got {tuple(photo.shape[-2:])} and {tuple(masks.shape[-2:])}"
            )
        if initial is not None:
            photo = torch.cat([photo, initial], dim=1)
        app = self.appearance(photo)
        comp = self.composition(masks)
        x = self.ups[0](torch.cat([app[-1], comp[-1]], dim=1))
        for i, up in enumerate(self.ups[1:], start=2):
            x = up(torch.cat([x, app[-i], comp[-i]], dim=1))
        return self.head(torch.cat([x, app[0], comp[0]], dim=1))


class Discriminator(nn.Module):
    """Conditional patch discriminator over (photo, masks, candidate[, initial]).

    ``forward`` returns logits; use :meth:`probabilities` for the sigmoid map.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        w = [b * m for m in DISC_WIDTH_MULT]
        self.net = nn.Sequential(
            nn.Conv2d(cfg.discriminator_channels, w[0], 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w[0], w[1], 4, stride=2, padding=1),
            nn.InstanceNorm2d(w[1]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w[1], w[2], 4, stride=2, padding=1),
            nn.InstanceNorm2d(w[2]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w[2], w[3], 4, stride=1, padding=1),
            nn.InstanceNorm2d(w[3]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w[3], 1, 4, stride=1, padding=1),
        )

    def forward(self, photo, masks, candidate, initial=None):
        if (initial is not None) != (self.cfg.stage == "two"):
            raise StageError("initial portrait must be given iff stage is 'two'")
        parts = [photo, masks, candidate]
        if initial is not None:
            parts.append(initial)
        return self.net(torch.cat(parts, dim=1))

    def probabilities(self, photo, masks, candidate, initial=None):
        return torch.sigmoid(self.forward(photo, masks, candidate, initial))


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(cfg: NetConfig, seed: int = 0) -> Generator:
    cfg.validate()
    g = Generator(cfg)
    init_weights(g, seed)
    return g


def build_discriminator(cfg: NetConfig, seed: int = 0) -> Discriminator:
    cfg.validate()
    d = Discriminator(cfg)
    init_weights(d, seed)
    return d


def generator_forward(g: Generator, photo, masks, initial=None):
    return g(photo, masks, initial)


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_count(cfg: NetConfig, which: str = "generator") -> int:
    """Number of trainable parameters of the generator or discriminator for ``cfg``."""
    cfg.validate()
    with torch.device("meta"):
        net = Generator(cfg) if which == "generator" else Discriminator(cfg)
    return _count(net)
