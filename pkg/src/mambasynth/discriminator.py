"""Conditional patch discriminator.

Scores overlapping image patches rather than whole images: a stack of
stride-2 convolutions with LeakyReLU (batch norm from the second layer on),
a final 1-channel conv, and a sigmoid head bounding every patch score in
(0, 1).  Conditioning is channel concatenation of the candidate target with
the source stack.  The default geometry gives each output score a 70x70
receptive field.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm2D, Conv2D, Module
from .tensor import ShapeError, Tensor

__all__ = ["PatchDiscriminator"]


class PatchDiscriminator(Module):
    def __init__(self, source_channels: int, base_width: int = 64,
                 rng: "np.random.Generator | None" = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = base_width
        in_ch = source_channels + 1  # candidate target stacked with sources
        self.source_channels = source_channels
        # (kernel, stride, pad) per layer; fixed 70x70-receptive-field geometry
        self.geometry = [(4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)]
        self.conv1 = Conv2D(in_ch, w, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2D(w, 2 * w, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2D(2 * w, dtype=dtype)
        self.conv3 = Conv2D(2 * w, 4 * w, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.norm3 = BatchNorm2D(4 * w, dtype=dtype)
        self.conv4 = Conv2D(4 * w, 8 * w, 4, stride=1, padding=1, rng=rng, dtype=dtype)
        self.norm4 = BatchNorm2D(8 * w, dtype=dtype)
        self.conv5 = Conv2D(8 * w, 1, 4, stride=1, padding=1, rng=rng, dtype=dtype)

    def __call__(self, y: Tensor, x: Tensor) -> Tensor:
        squeeze = y.ndim == 3
        if squeeze:
            y = T.reshape(y, (1,) + y.shape)
            x = T.reshape(x, (1,) + x.shape)
        if y.shape[0] != x.shape[0] or y.shape[2:] != x.shape[2:]:
            raise ShapeError(
                f"candidate {y.shape} and sources {x.shape} are not spatially aligned"
            )
        if x.shape[1] != self.source_channels:
            raise ShapeError(
                f"discriminator conditioned on {self.source_channels} sources, got {x.shape[1]}"
            )
        h = T.concat([y, x], axis=1)
        h = T.leaky_relu(self.conv1(h), 0.2)
        h = T.leaky_relu(self.norm2(self.conv2(h)), 0.2)
        h = T.leaky_relu(self.norm3(self.conv3(h)), 0.2)
        h = T.leaky_relu(self.norm4(self.conv4(h)), 0.2)
        scores = T.sigmoid(self.conv5(h))
        if squeeze:
            scores = T.reshape(scores, scores.shape[1:])
        return scores

    # -- receptive-field arithmetic ------------------------------------------------

    def receptive_field(self) -> tuple[int, int, int]:
        """(size, stride, offset): output score (i, j) sees input rows
        [i*stride + offset, i*stride + offset + size)."""
        size, stride, start = 1, 1, 0
        for k, s, p in self.geometry:
            size = size + (k - 1) * stride
            start = start - p * stride
            stride *= s
        return size, stride, start

    def score_patch_bounds(self, i: int, j: int, h: int, w: int) -> tuple[int, int, int, int]:
        """Input-pixel bounds (clipped) feeding output score (i, j)."""
        size, stride, start = self.receptive_field()
        r0 = max(0, i * stride + start)
        c0 = max(0, j * stride + start)
        r1 = min(h, i * stride + start + size)
        c1 = min(w, j * stride + start + size)
        return r0, r1, c0, c1
