"""Differentiable neural layers: convolutions, batch norm, linear projections.

Convolutions use cross-correlation semantics (kernels are not flipped) and
im2col + matrix multiply internally.  A transposed convolution is the exact
adjoint of the convolution with the same geometry: its forward pass reuses
the convolution's input-gradient routine, so the adjoint identity
``<conv(x), y> == <x, conv_t(y)>`` holds to machine precision.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    apply_primitive,
)

__all__ = [
    "Parameter",
    "Module",
    "Conv2D",
    "BatchNorm2D",
    "Linear",
    "conv2d",
    "conv2d_transpose",
]


class Parameter:
    """Mutable slot holding an immutable, gradient-tracked tensor.

    Optimizers replace ``value`` wholesale; tensors themselves never change.
    """

    __slots__ = ("value",)

    def __init__(self, data, dtype=None):
        self.value = Tensor(data, dtype=dtype, requires_grad=True)

    def assign(self, data: np.ndarray) -> None:
        self.value = Tensor(data, dtype=self.value.dtype, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self):
        return self.value.shape


class Module:
    """Minimal container: parameter/buffer discovery and train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = ""):
        for key, val in self._buffers.items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def count_parameters(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())


# -- raw convolution kernels (numpy, zero padding) ------------------------------


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))  # (B, OH, OW, C, kh, kw)


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# kernels at least this large skip im2col for an offset-accumulation loop,
# avoiding a (OH*OW, C*kh*kw) buffer that dwarfs the actual arithmetic
_OFFSET_KERNEL_AREA = 25


def _conv_fwd_offsets(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    xp = _pad_input(x, pad)
    b, c, hp, wp = xp.shape
    c_out, _, kh, kw = w.shape
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    y = np.zeros((b, c_out, oh * ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            y += np.matmul(w[:, :, u, v], xs.reshape(b, c, oh * ow))
    return y.reshape(b, c_out, oh, ow)


def _conv_dx_offsets(w: np.ndarray, gy: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    c_out, _, kh, kw = w.shape
    b, _, oh, ow = gy.shape
    _, c, h, wid = x_shape
    gxp = np.zeros((b, c, h + 2 * pad, wid + 2 * pad), dtype=gy.dtype)
    gy2 = gy.reshape(b, c_out, oh * ow)
    for u in range(kh):
        for v in range(kw):
            contrib = np.matmul(w[:, :, u, v].T, gy2).reshape(b, c, oh, ow)
            gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += contrib
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp)


def _conv_dw_offsets(x: np.ndarray, gy: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    xp = _pad_input(x, pad)
    b, c, _, _ = xp.shape
    c_out, _, kh, kw = w_shape
    _, _, oh, ow = gy.shape
    gy2 = gy.reshape(b, c_out, oh * ow)
    gw = np.empty(w_shape, dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            prod = np.matmul(gy2, xs.reshape(b, c, oh * ow).transpose(0, 2, 1))
            gw[:, :, u, v] = prod.sum(axis=0)
    return gw


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    b, c, h, win_ = x.shape
    c_out, _, kh, kw = w.shape
    oh, ow = _out_extent(h, kh, stride, pad), _out_extent(win_, kw, stride, pad)
    if groups == 1 and kh * kw >= _OFFSET_KERNEL_AREA:
        return _conv_fwd_offsets(x, w, stride, pad)
    cols = _im2col(_pad_input(x, pad), kh, kw, stride)
    if groups == 1:
        y = cols.reshape(b * oh * ow, c * kh * kw) @ w.reshape(c_out, -1).T
        return np.ascontiguousarray(
            y.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)
        )
    # depthwise: one kernel per channel
    return np.ascontiguousarray(np.einsum("bijckl,ckl->bcij", cols, w[:, 0]))


def _conv_dw(x: np.ndarray, gy: np.ndarray, w_shape, stride: int, pad: int, groups: int,
             cols: "np.ndarray | None" = None) -> np.ndarray:
    c_out, _, kh, kw = w_shape
    b, _, oh, ow = gy.shape
    if groups == 1 and kh * kw >= _OFFSET_KERNEL_AREA:
        return _conv_dw_offsets(x, gy, w_shape, stride, pad)
    if cols is None:
        cols = _im2col(_pad_input(x, pad), kh, kw, stride)
    if groups == 1:
        gw = gy.transpose(0, 2, 3, 1).reshape(b * oh * ow, c_out).T @ cols.reshape(
            b * oh * ow, -1
        )
        return gw.reshape(w_shape)
    return np.einsum("bijckl,bcij->ckl", cols, gy).reshape(w_shape)


def _conv_dx(w: np.ndarray, gy: np.ndarray, x_shape, stride: int, pad: int, groups: int) -> np.ndarray:
    c_out, _, kh, kw = w.shape
    b, _, oh, ow = gy.shape
    _, c, h, win_ = x_shape
    if groups == 1 and kh * kw >= _OFFSET_KERNEL_AREA:
        return _conv_dx_offsets(w, gy, x_shape, stride, pad)
    if groups == 1 and stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0:
        # stride-1 input gradient is itself a convolution with the
        # channel-transposed, spatially flipped kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_fwd(gy, w_flip, 1, kh - 1 - pad, 1)
    if groups == 1:
        gcols = gy.transpose(0, 2, 3, 1).reshape(b * oh * ow, c_out) @ w.reshape(c_out, -1)
        gcols = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    else:
        gcols = np.einsum("bcij,ckl->bcklij", gy, w[:, 0])
    gx = np.zeros((b, c, h + 2 * pad, win_ + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                :, :, i, j
            ]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


# -- tape primitives -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: "Tensor | None", stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding; gradients for input, weight, bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}, {w.shape}")
    c_out, c_in_g, kh, kw = w.shape
    if groups not in (1, x.shape[1]):
        raise ConfigError(f"conv2d groups must be 1 or C_in, got {groups}")
    if groups == 1 and x.shape[1] != c_in_g:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight expects {c_in_g}")
    if groups != 1 and (x.shape[1] != c_out or c_in_g != 1):
        raise ShapeError(
            f"depthwise conv2d needs weight (C, 1, kh, kw) matching input channels, "
            f"got input {x.shape[1]} and weight {w.shape}"
        )
    oh = _out_extent(x.shape[2], kh, stride, padding)
    ow = _out_extent(x.shape[3], kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"conv2d output would be empty: input {x.shape[2:]} kernel ({kh},{kw}) "
            f"stride {stride} pad {padding}"
        )
    bsz = x.shape[0]
    cols = None
    if groups == 1 and kh * kw >= _OFFSET_KERNEL_AREA:
        y = _conv_fwd_offsets(x.data, w.data, stride, padding)
    else:
        cols = _im2col(_pad_input(x.data, padding), kh, kw, stride)
        if groups == 1:
            y = np.ascontiguousarray(
                (cols.reshape(bsz * oh * ow, -1) @ w.data.reshape(c_out, -1).T)
                .reshape(bsz, oh, ow, c_out)
                .transpose(0, 3, 1, 2)
            )
        else:
            y = np.ascontiguousarray(np.einsum("bijckl,ckl->bcij", cols, w.data[:, 0]))
        if cols.nbytes > 32 * 1024 * 1024:
            cols = None  # too large to keep for the backward pass
    if b is not None:
        y = y + b.data[None, :, None, None]

    def vjp(g):
        gx = _conv_dx(w.data, g, x.shape, stride, padding, groups)
        gw = _conv_dw(x.data, g, w.shape, stride, padding, groups, cols=cols)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv2d", y, inputs, vjp)


def conv2d_transpose(x: Tensor, w: Tensor, b: "Tensor | None", stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Exact adjoint of :func:`conv2d` with identical weight and geometry.

    The weight keeps its forward-convolution orientation (C_out, C_in, kh, kw);
    this op maps C_out feature maps back to C_in maps at the upsampled size
    (H-1)*stride + k - 2*pad.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input/weight, got {x.shape}, {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_out:
        raise ShapeError(
            f"conv2d_transpose channel mismatch: input {x.shape[1]}, weight expects {c_out}"
        )
    oh = (x.shape[2] - 1) * stride + kh - 2 * padding
    ow = (x.shape[3] - 1) * stride + kw - 2 * padding
    if oh < 1 or ow < 1:
        raise ConfigError("conv2d_transpose output would be empty")
    out_shape = (x.shape[0], c_in, oh, ow)
    y = _conv_dx(w.data, x.data, out_shape, stride, padding, 1)
    if b is not None:
        y = y + b.data[None, :, None, None]

    def vjp(g):
        gx = _conv_fwd(g, w.data, stride, padding, 1)
        gw = _conv_dw(g, x.data, w.shape, stride, padding, 1)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv2d_transpose", y, inputs, vjp)


# -- layers ----------------------------------------------------------------------

WEIGHT_STD = 0.02  # zero-mean normal init, documented gain


class Conv2D(Module):
    """2-D convolution layer; supports transposed and depthwise variants.

    For ``transposed=True`` the weight is stored in the underlying forward
    convolution's orientation, i.e. shape (in_channels, out_channels, k, k).
    Reflection padding composes a differentiable pad with an unpadded conv.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zeros",
                 depthwise: bool = False, transposed: bool = False,
                 rng: "np.random.Generator | None" = None, dtype=np.float32):
        super().__init__()
        if depthwise and (transposed or in_channels != out_channels):
            raise ConfigError("depthwise conv requires in_channels == out_channels, not transposed")
        if pad_mode not in ("zeros", "reflect"):
            raise ConfigError(f"unknown pad_mode '{pad_mode}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        self.depthwise = depthwise
        self.transposed = transposed
        if transposed:
            w_shape = (in_channels, out_channels, kernel_size, kernel_size)
        elif depthwise:
            w_shape = (out_channels, 1, kernel_size, kernel_size)
        else:
            w_shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.normal(0.0, WEIGHT_STD, w_shape).astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv2d_transpose(x, self.weight.value, self.bias.value,
                                    self.stride, self.padding)
        pad = self.padding
        if self.pad_mode == "reflect" and pad > 0:
            x = T.pad2d(x, pad, "reflect")
            pad = 0
        groups = self.in_channels if self.depthwise else 1
        return conv2d(x, self.weight.value, self.bias.value, self.stride, pad, groups)


def _batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused training-mode batch norm: one primitive, analytic backward."""
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    with np.errstate(over="ignore", invalid="ignore"):
        mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mean
        var = np.mean(centered * centered, axis=axes, keepdims=True)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise T.NumericError("non-finite batch statistics in 'batchnorm'")
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv
    gamma_r = gamma.data.reshape(1, -1, 1, 1)
    y = gamma_r * xhat + beta.data.reshape(1, -1, 1, 1)

    def vjp(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        dx = (gamma_r * inv) * (g - g_mean - xhat * gx_mean)
        return (dx, dgamma, dbeta)

    out = apply_primitive("batchnorm", y, (x, gamma, beta), vjp)
    return out, mean.reshape(-1), var.reshape(-1)


class BatchNorm2D(Module):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by batch statistics over (B, H, W) and updates
    the running mean/var by exponential moving average (var stored unbiased).
    Eval mode is a fixed affine map built from the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        if not (0.0 < momentum < 1.0):
            raise ConfigError(f"momentum must be in (0,1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.dtype = np.dtype(dtype)
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects (B,{self.channels},H,W), got {x.shape}")
        if self.training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            if n < 2:
                raise ConfigError(f"degenerate batch: B*H*W={n} < 2 in training mode")
            y, batch_mean, batch_var = _batchnorm_train(
                x, self.gamma.value, self.beta.value, self.eps)
            m = self.momentum
            rm = self._buffers["running_mean"]
            rv = self._buffers["running_var"]
            unbiased = batch_var.astype(self.dtype) * (n / (n - 1))
            self._buffers["running_mean"] = ((1 - m) * rm + m * batch_mean.astype(self.dtype)).astype(self.dtype)
            self._buffers["running_var"] = ((1 - m) * rv + m * unbiased).astype(self.dtype)
            return y
        eps = Tensor._wrap(np.asarray(self.eps, dtype=x.dtype))
        gamma = T.reshape(self.gamma.value, (1, self.channels, 1, 1))
        beta = T.reshape(self.beta.value, (1, self.channels, 1, 1))
        rm = Tensor._wrap(self._buffers["running_mean"].astype(x.dtype).reshape(1, -1, 1, 1))
        rv = Tensor._wrap(self._buffers["running_var"].astype(x.dtype).reshape(1, -1, 1, 1))
        return T.add(T.mul(T.div(T.sub(x, rm), T.sqrt(T.add(rv, eps))), gamma), beta)


class Linear(Module):
    """Affine projection; weight stored (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: "np.random.Generator | None" = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            rng.normal(0.0, WEIGHT_STD, (in_features, out_features)).astype(dtype)
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return T.add(T.matmul(x, self.weight.value), self.bias.value)
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        y = T.add(T.matmul(flat, self.weight.value), self.bias.value)
        return T.reshape(y, lead + (self.out_features,))
