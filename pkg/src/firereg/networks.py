"""Encoder, decoders and transformation networks of the FIRE model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry

DIRECTIONS = ("AB", "BA")
GROUPS = ("g", "t_af", "t_nr")


@dataclass
class ModelConfig:
    n: int = 2
    base_width: int = 32
    nr_scale: float = 1.0
    image_shape: Tuple[int, ...] = (64, 64)
    n_res_blocks: int = 4
    feature_pad: float = 0.0
    # border handling of encoder/decoder convs; zero padding lets the encoder
    # encode absolute position, which makes unaligned features look matched
    synthesis_padding: str = "reflect"

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.n not in (2, 3):
            raise ValueError(f"n must be 2 or 3, got {self.n}")
        if len(self.image_shape) != self.n:
            raise ValueError(f"image_shape {self.image_shape} is not {self.n}D")
        if any(s % 4 for s in self.image_shape):
            raise ValueError(f"every axis of image_shape must be divisible by 4, got {self.image_shape}")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if not 0 < self.nr_scale <= 1:
            raise ValueError("nr_scale must lie in (0, 1]")
        if self.synthesis_padding not in ("zeros", "reflect", "replicate"):
            raise ValueError(f"unknown synthesis_padding {self.synthesis_padding!r}")

    @property
    def c_g(self) -> int:
        return 4 * self.base_width

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(s // 4 for s in self.image_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def _conv(n):
    return nn.Conv2d if n == 2 else nn.Conv3d


def _norm(n):
    return nn.InstanceNorm2d if n == 2 else nn.InstanceNorm3d


class ConvBlock(nn.Sequential):
    """3-conv, instance norm, ReLU."""

    def __init__(self, n, c_in, c_out, stride=1, padding_mode="zeros"):
        super().__init__(
            _conv(n)(c_in, c_out, 3, stride=stride, padding=1, padding_mode=padding_mode),
            _norm(n)(c_out),
            nn.ReLU(inplace=True),
        )


class ResBlock(nn.Module):
    def __init__(self, n, channels, padding_mode="zeros"):
        super().__init__()
        self.body = nn.Sequential(
            _conv(n)(channels, channels, 3, padding=1, padding_mode=padding_mode),
            _norm(n)(channels),
            nn.ReLU(inplace=True),
            _conv(n)(channels, channels, 3, padding=1, padding_mode=padding_mode),
            _norm(n)(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class UpBlock(nn.Module):
    """Nearest-neighbour x2 resize followed by a conv block."""

    def __init__(self, n, c_in, c_out, padding_mode="zeros"):
        super().__init__()
        self.conv = ConvBlock(n, c_in, c_out, padding_mode=padding_mode)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, w, pm = cfg.n, cfg.base_width, cfg.synthesis_padding
        self.layers = nn.Sequential(
            ConvBlock(n, 1, w, padding_mode=pm),
            ConvBlock(n, w, 2 * w, stride=2, padding_mode=pm),
            ConvBlock(n, 2 * w, 4 * w, stride=2, padding_mode=pm),
            *[ResBlock(n, 4 * w, pm) for _ in range(cfg.n_res_blocks)],
        )

    def forward(self, x):
        return self.layers(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, c, pm = cfg.n, cfg.c_g, cfg.synthesis_padding
        self.layers = nn.Sequential(
            *[ResBlock(n, c, pm) for _ in range(cfg.n_res_blocks)],
            UpBlock(n, c, c // 2, pm),
            UpBlock(n, c // 2, c // 4, pm),
            _conv(n)(c // 4, 1, 3, padding=1, padding_mode=pm),
            nn.Tanh(),
        )

    def forward(self, f):
        return self.layers(f)


class AffineNet(nn.Module):
    """Regresses an n x (n+1) affine from a (moving, target) feature pair.

    The last layer starts at zero weight with an identity bias, so a fresh net
    returns the identity transform for any input.
    """

    def __init__(self, cfg: ModelConfig, hidden: int = 64):
        super().__init__()
        n, c = cfg.n, cfg.c_g
        self.n = n
        self.convs = nn.Sequential(
            ConvBlock(n, 2 * c, c),
            ConvBlock(n, c, c, stride=2),
            # no instance norm right before pooling: it would zero every channel
            # mean, leaving the pooled vector nothing but distribution shape
            _conv(n)(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc1 = nn.Linear(c, hidden)
        self.fc2 = nn.Linear(hidden, n * (n + 1))
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.eye(n, n + 1).flatten())

    def forward(self, f_moving, f_target):
        h = self.convs(torch.cat([f_moving, f_target], dim=1))
        h = h.mean(dim=tuple(range(2, h.dim())))
        theta = self.fc2(F.relu(self.fc1(h)))
        return theta.view(-1, self.n, self.n + 1)


class NonrigidNet(nn.Module):
    """Predicts a full-resolution displacement field from quarter-resolution features.

    Output is ``nr_scale * tanh(.)``; the final conv is zero-initialised so a
    fresh net emits an all-zero field.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, c = cfg.n, cfg.c_g
        self.n = n
        self.nr_scale = cfg.nr_scale
        self.branch_moving = nn.Sequential(ConvBlock(n, c, c // 2), ConvBlock(n, c // 2, c // 2))
        self.branch_target = nn.Sequential(ConvBlock(n, c, c // 2), ConvBlock(n, c // 2, c // 2))
        self.merge = nn.Sequential(ConvBlock(n, c, c), ConvBlock(n, c, c))
        self.up = nn.Sequential(UpBlock(n, c, c // 2), UpBlock(n, c // 2, c // 4))
        self.out = _conv(n)(c // 4, n, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f_moving_af, f_target):
        h = torch.cat([self.branch_moving(f_moving_af), self.branch_target(f_target)], dim=1)
        h = self.up(self.merge(h))
        u = self.nr_scale * torch.tanh(self.out(h))
        return torch.movedim(u, 1, -1)


class FireModel(nn.Module):
    """Encoder G, decoders F^{A->B}/F^{B->A}, transformation nets T^{A->B}/T^{B->A}.

    Parameters are created under a private RNG seeded with ``seed`` so two
    models built from the same config and seed are identical.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg)
            self.decoders = nn.ModuleDict({d: Decoder(cfg) for d in DIRECTIONS})
            self.affine_nets = nn.ModuleDict({d: AffineNet(cfg) for d in DIRECTIONS})
            self.nonrigid_nets = nn.ModuleDict({d: NonrigidNet(cfg) for d in DIRECTIONS})

    def group_modules(self) -> Dict[str, List[nn.Module]]:
        return {
            "g": [self.encoder, self.decoders],
            "t_af": [self.affine_nets],
            "t_nr": [self.nonrigid_nets],
        }

    def named_group_parameters(self, group: str) -> Dict[str, nn.Parameter]:
        prefix = {"g": ("encoder.", "decoders."), "t_af": ("affine_nets.",), "t_nr": ("nonrigid_nets.",)}[group]
        return {k: p for k, p in self.named_parameters() if k.startswith(prefix)}

    def group_parameters(self, group: str) -> List[nn.Parameter]:
        return list(self.named_group_parameters(group).values())

    def _check_image(self, x):
        expected = (1,) + self.cfg.image_shape
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def encode(self, x):
        self._check_image(x)
        return self.encoder(x)

    def decode(self, f, direction):
        self._check_features(f)
        return self.decoders[direction](f)

    def _check_features(self, f):
        expected = (self.cfg.c_g,) + self.cfg.feature_shape
        if tuple(f.shape[1:]) != expected:
            raise ValueError(f"expected features of shape (B, {', '.join(map(str, expected))}), got {tuple(f.shape)}")

    def affine(self, f_moving, f_target, direction):
        self._check_features(f_moving)
        self._check_features(f_target)
        return self.affine_nets[direction](f_moving, f_target)

    def nonrigid(self, f_moving_af, f_target, direction):
        self._check_features(f_moving_af)
        self._check_features(f_target)
        return self.nonrigid_nets[direction](f_moving_af, f_target)

    def warp_features(self, f, A, u=None):
        """Warp a feature map with a transform defined in normalized coordinates."""
        if u is not None:
            u = geometry.resize_field(u, f.shape[2:])
        grid = geometry.identity_grid(f.shape[2:], dtype=f.dtype, device=f.device)
        return geometry.sample(f, geometry.warp_grid(grid, A, u), "linear", self.cfg.feature_pad)

    def transform_from_features(self, f_moving, f_target, direction):
        A = self.affine(f_moving, f_target, direction)
        f_moving_af = self.warp_features(f_moving, A)
        u = self.nonrigid(f_moving_af, f_target, direction)
        return A, u, f_moving_af

    def forward_transform(self, x_moving, x_target, direction):
        """Predict ``phi = (A, u)`` warping ``x_moving`` onto ``x_target``."""
        A, u, _ = self.transform_from_features(self.encode(x_moving), self.encode(x_target), direction)
        return A, u
