"""Bottleneck building blocks.

Two units alternate through the generator bottleneck: a residual conv block
(two conv+norm+ReLU cascades around an additive shortcut) and a mixer block
that runs a gated four-direction selective scan over patch tokens, adds the
result back onto the tokens, and then mixes channels through a parallel
1x1-conv / stacked-3x3-conv pair.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm2D, Conv2D, Linear, Module
from .scan import SSMLayer
from .tensor import ConfigError, ShapeError, Tensor

__all__ = ["tokenize", "detokenize", "MambaMixerBlock", "ResidualConvBlock"]


def tokenize(f: Tensor, patch: int) -> Tensor:
    """Rearrange (B, C, H, W) into (B, P, C*patch^2) non-overlapping patch tokens.

    Lossless: :func:`detokenize` restores the input bit for bit.
    """
    if f.ndim != 4:
        raise ShapeError(f"tokenize expects (B,C,H,W), got {f.shape}")
    b, c, h, w = f.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"patch size {patch} must divide spatial extents {h}x{w}")
    gh, gw = h // patch, w // patch
    x = T.reshape(f, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, p, p)
    return T.reshape(x, (b, gh * gw, c * patch * patch))


def detokenize(tokens: Tensor, channels: int, grid_hw: tuple[int, int], patch: int) -> Tensor:
    b, p_count, width = tokens.shape
    gh, gw = grid_hw
    if p_count != gh * gw or width != channels * patch * patch:
        raise ShapeError(
            f"detokenize: tokens {tokens.shape} do not match grid {grid_hw}, "
            f"channels {channels}, patch {patch}"
        )
    x = T.reshape(tokens, (b, gh, gw, channels, patch, patch))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))  # (B, C, gh, p, gw, p)
    return T.reshape(x, (b, channels, gh * patch, gw * patch))


class MambaMixerBlock(Module):
    """Gated selective-scan token mixer followed by channel mixing.

    Token path: tokens are linearly embedded twice; one embedding becomes a
    SiLU gate, the other goes through a depthwise conv, SiLU, and the
    four-direction scan layer.  The gated product is projected back to token
    width and added to the input tokens.  Channel path: a 1x1 conv and two
    stacked 3x3 convs, applied in parallel to the token result and summed.
    Input and output shapes are identical.
    """

    def __init__(self, channels: int, patch: int = 1, state_dim: int = 16,
                 expand_ratio: int = 2, share_directions: bool = False,
                 scan_core: str = "chunked",
                 rng: "np.random.Generator | None" = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.patch = patch
        token_width = channels * patch * patch
        inner = expand_ratio * token_width
        self.inner = inner
        self.lin_gate = Linear(token_width, inner, rng=rng, dtype=dtype)
        self.lin_in = Linear(token_width, inner, rng=rng, dtype=dtype)
        self.dwconv = Conv2D(inner, inner, 3, padding=1, depthwise=True, rng=rng, dtype=dtype)
        self.ssm = SSMLayer(inner, state_dim, share_directions=share_directions,
                            core=scan_core, rng=rng, dtype=dtype)
        self.lin_out = Linear(inner, token_width, rng=rng, dtype=dtype)
        self.mix_conv = Conv2D(channels, channels, 1, rng=rng, dtype=dtype)
        self.conv_a = Conv2D(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.conv_b = Conv2D(channels, channels, 3, padding=1, rng=rng, dtype=dtype)

    def gate_branch(self, tokens: Tensor) -> Tensor:
        return T.silu(self.lin_gate(tokens))

    def ssm_branch(self, tokens: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        gh, gw = grid_hw
        b = tokens.shape[0]
        embedded = self.lin_in(tokens)  # (B, P, inner)
        grid = T.transpose(T.reshape(embedded, (b, gh, gw, self.inner)), (0, 3, 1, 2))
        mixed = T.silu(self.dwconv(grid))
        scanned = self.ssm(mixed)  # (B, inner, gh, gw)
        return T.reshape(T.transpose(scanned, (0, 2, 3, 1)), (b, gh * gw, self.inner))

    def __call__(self, f: Tensor) -> Tensor:
        squeeze = f.ndim == 3
        if squeeze:
            f = T.reshape(f, (1,) + f.shape)
        b, c, h, w = f.shape
        if c != self.channels:
            raise ShapeError(f"mixer block built for {self.channels} channels, got {c}")
        grid_hw = (h // self.patch, w // self.patch)
        z_in = tokenize(f, self.patch)
        gate = self.gate_branch(z_in)
        mixed = self.ssm_branch(z_in, grid_hw)
        z_tokens = T.add(z_in, self.lin_out(T.mul(gate, mixed)))
        y = detokenize(z_tokens, c, grid_hw, self.patch)
        out = T.add(self.mix_conv(y), self.conv_b(self.conv_a(y)))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    def freeze_to_identity(self) -> None:
        """Zero the residual projection and make channel mixing the identity."""
        tw = self.channels * self.patch * self.patch
        self.lin_out.weight.assign(np.zeros((self.inner, tw), dtype=self.lin_out.weight.data.dtype))
        self.lin_out.bias.assign(np.zeros(tw, dtype=self.lin_out.bias.data.dtype))
        eye = np.zeros((self.channels, self.channels, 1, 1), dtype=self.mix_conv.weight.data.dtype)
        for i in range(self.channels):
            eye[i, i, 0, 0] = 1.0
        self.mix_conv.weight.assign(eye)
        self.mix_conv.bias.assign(np.zeros(self.channels, dtype=eye.dtype))
        zk = np.zeros_like(self.conv_b.weight.data)
        self.conv_b.weight.assign(zk)
        self.conv_b.bias.assign(np.zeros(self.channels, dtype=zk.dtype))


class ResidualConvBlock(Module):
    """Additive shortcut around two conv + batch-norm + ReLU cascades."""

    def __init__(self, channels: int, rng: "np.random.Generator | None" = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.conv1 = Conv2D(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.norm1 = BatchNorm2D(channels, dtype=dtype)
        self.conv2 = Conv2D(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2D(channels, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        squeeze = f.ndim == 3
        if squeeze:
            f = T.reshape(f, (1,) + f.shape)
        if f.shape[1] != self.channels:
            raise ShapeError(f"residual block built for {self.channels} channels, got {f.shape[1]}")
        y = T.relu(self.norm1(self.conv1(f)))
        y = T.relu(self.norm2(self.conv2(y)))
        out = T.add(f, y)
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    def freeze_to_identity(self) -> None:
        """Zero the second conv so the cascade contributes nothing."""
        self.conv2.weight.assign(np.zeros_like(self.conv2.weight.data))
        self.conv2.bias.assign(np.zeros(self.channels, dtype=self.conv2.bias.data.dtype))
        self.norm2.beta.assign(np.zeros(self.channels, dtype=self.norm2.beta.data.dtype))
        self.norm2._buffers["running_mean"][:] = 0.0
        self.norm2._buffers["running_var"][:] = 1.0
