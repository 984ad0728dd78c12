"""The translation generator: encoder, mixer-injected bottleneck, decoder.

Three conv stages downsample the stacked source images by a configurable
factor, a constant-resolution bottleneck alternates residual conv blocks with
mixer blocks at selected stages, and three decoder stages upsample back to
image size with skip connections from the matching encoder stages.  The
output passes through Tanh, so synthesized images live in (-1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import MambaMixerBlock, ResidualConvBlock
from .layers import BatchNorm2D, Conv2D, Module
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "GeneratorConfig",
    "Generator",
    "build_generator",
    "assemble_input",
    "count_parameters",
    "parameter_counts",
]


def default_mixer_stages(num_stages: int) -> frozenset[int]:
    """First, middle (rounded up), and last stage indices (1-based)."""
    return frozenset({1, math.ceil(num_stages / 2), num_stages})


@dataclass
class GeneratorConfig:
    num_sources: int = 2
    height: int = 256
    width: int = 256
    downsample: int = 4
    channels: int = 256            # bottleneck width
    stages: int = 9                # bottleneck depth
    mixer_stages: "frozenset[int] | None" = None
    patch: int = 1
    state_dim: int = 16
    expand_ratio: int = 2
    base_width: "int | None" = None  # first encoder width; defaults to channels // 4
    skip_mode: str = "concat"        # or "add"
    share_directions: bool = False
    scan_core: str = "chunked"
    dtype: str = "float32"

    def __post_init__(self):
        if self.mixer_stages is None:
            self.mixer_stages = default_mixer_stages(self.stages)
        else:
            self.mixer_stages = frozenset(self.mixer_stages)
        if self.base_width is None:
            self.base_width = max(1, self.channels // 4)
        if self.num_sources < 1:
            raise ConfigError("need at least one source modality")
        if self.downsample != 4:
            raise ConfigError("encoder geometry realizes a fixed 4x downsampling")
        if self.height % self.downsample or self.width % self.downsample:
            raise ConfigError(
                f"image extents {self.height}x{self.width} must be divisible by {self.downsample}"
            )
        if not self.mixer_stages <= set(range(1, self.stages + 1)):
            raise ConfigError(
                f"mixer stages {sorted(self.mixer_stages)} outside 1..{self.stages}"
            )
        grid = self.height // self.downsample
        if grid % self.patch or (self.width // self.downsample) % self.patch:
            raise ConfigError(f"patch {self.patch} must divide the latent grid")
        if self.skip_mode not in ("concat", "add"):
            raise ConfigError(f"unknown skip_mode '{self.skip_mode}'")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["mixer_stages"] = sorted(self.mixer_stages)
        return d

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = dict(d)
        if d.get("mixer_stages") is not None:
            d["mixer_stages"] = frozenset(d["mixer_stages"])
        return GeneratorConfig(**d)


class _ConvStage(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, conv: Conv2D, channels: int, dtype):
        super().__init__()
        self.conv = conv
        self.norm = BatchNorm2D(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class Generator(Module):
    def __init__(self, config: GeneratorConfig, rng: "np.random.Generator | None" = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        dt = config.np_dtype
        w1, w2, c = config.base_width, 2 * config.base_width, config.channels

        self.enc1 = _ConvStage(
            Conv2D(config.num_sources, w1, 7, padding=3, pad_mode="reflect", rng=rng, dtype=dt),
            w1, dt)
        self.enc2 = _ConvStage(Conv2D(w1, w2, 4, stride=2, padding=1, rng=rng, dtype=dt), w2, dt)
        self.enc3 = _ConvStage(Conv2D(w2, c, 4, stride=2, padding=1, rng=rng, dtype=dt), c, dt)

        self.mixers: dict[int, MambaMixerBlock] = {}
        mixer_list = []
        residual_list = []
        for j in range(1, config.stages + 1):
            if j in config.mixer_stages:
                blk = MambaMixerBlock(
                    c, patch=config.patch, state_dim=config.state_dim,
                    expand_ratio=config.expand_ratio,
                    share_directions=config.share_directions,
                    scan_core=config.scan_core, rng=rng, dtype=dt)
                self.mixers[j] = blk
                mixer_list.append(blk)
            residual_list.append(ResidualConvBlock(c, rng=rng, dtype=dt))
        self.mixer_blocks = mixer_list        # discovered by Module traversal
        self.residual_blocks = residual_list

        self.dec1 = _ConvStage(
            Conv2D(c, w2, 4, stride=2, padding=1, transposed=True, rng=rng, dtype=dt), w2, dt)
        self.dec2 = _ConvStage(
            Conv2D(w2, w1, 4, stride=2, padding=1, transposed=True, rng=rng, dtype=dt), w1, dt)
        if config.skip_mode == "concat":
            self.fuse1 = Conv2D(2 * w2, w2, 1, rng=rng, dtype=dt)
            self.fuse2 = Conv2D(2 * w1, w1, 1, rng=rng, dtype=dt)
        self.out_conv = Conv2D(w1, 1, 7, padding=3, pad_mode="reflect", rng=rng, dtype=dt)

    # -- forward ---------------------------------------------------------------

    def _fuse(self, decoded: Tensor, skip: Tensor, which: int) -> Tensor:
        if self.config.skip_mode == "add":
            return T.add(decoded, skip)
        fused = T.concat([decoded, skip], axis=1)
        return (self.fuse1 if which == 1 else self.fuse2)(fused)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        return e1, e2, self.enc3(e2)

    def bottleneck(self, latent: Tensor, trace: "list | None" = None) -> Tensor:
        f = latent
        for j in range(1, self.config.stages + 1):
            if j in self.config.mixer_stages:
                if trace is not None:
                    trace.append(("mixer", j))
                f = self.mixers[j](f)
            if trace is not None:
                trace.append(("residual", j))
            f = self.residual_blocks[j - 1](f)
        return f

    def decode(self, f: Tensor, e1: Tensor, e2: Tensor) -> Tensor:
        d1 = self._fuse(self.dec1(f), e2, 1)
        d2 = self._fuse(self.dec2(d1), e1, 2)
        return T.tanh(self.out_conv(d2))

    def __call__(self, x: Tensor, trace: "list | None" = None) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        cfg = self.config
        if x.shape[1] != cfg.num_sources:
            raise ShapeError(
                f"input has {x.shape[1]} source channels, config expects {cfg.num_sources}"
            )
        if x.shape[2] % cfg.downsample or x.shape[3] % cfg.downsample:
            raise ShapeError(
                f"input extents {x.shape[2:]} not divisible by {cfg.downsample}"
            )
        e1, e2, latent = self.encode(x)
        f = self.bottleneck(latent, trace)
        y = self.decode(f, e1, e2)
        if squeeze:
            y = T.reshape(y, y.shape[1:])
        return y

    # -- instrumentation ---------------------------------------------------------

    def zero_residual_projections(self) -> None:
        """Make every bottleneck stage the identity map (for invariants)."""
        for blk in self.residual_blocks:
            blk.freeze_to_identity()
        for blk in self.mixers.values():
            blk.freeze_to_identity()


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    """Deterministic construction: the same seed yields bitwise-equal weights."""
    return Generator(config, rng=np.random.default_rng(np.random.SeedSequence(seed)))


def assemble_input(sources: "list[Tensor | np.ndarray]") -> Tensor:
    """Stack per-modality (H, W) images into a (I, H, W) channel tensor.

    Modality order is part of the task definition; it is preserved verbatim.
    """
    if not sources:
        raise ShapeError("assemble_input needs at least one source image")
    tensors = [s if isinstance(s, Tensor) else Tensor(s) for s in sources]
    shapes = [t.shape for t in tensors]
    if any(len(s) != 2 for s in shapes) or len(set(shapes)) != 1:
        raise ShapeError(f"source images must share (H, W); got {shapes}")
    stacked = [T.reshape(t, (1,) + t.shape) for t in tensors]
    return T.concat(stacked, axis=0) if len(stacked) > 1 else stacked[0]


def count_parameters(model: Module) -> int:
    return model.count_parameters()


def parameter_counts(model: Module) -> dict[str, int]:
    """Learnable scalar counts per top-level submodule."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.value.size
    return counts
