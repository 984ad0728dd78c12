"""Dense tensor values with reverse-mode autodiff over a recorded tape.

Every differentiable operation in the package bottoms out in the primitives
defined here (or registered through :func:`apply_primitive`).  Tensors are
immutable once created; gradient tracking works by recording primitive
applications onto the currently active :class:`Tape` and replaying them in
reverse.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NumericError",
    "ContractError",
    "ConfigError",
    "tensor",
    "apply_primitive",
    "map_unary",
    "map_binary",
    "UNARY_KINDS",
    "BINARY_KINDS",
    "relu",
    "silu",
    "tanh",
    "exp",
    "neg",
    "sigmoid",
    "softplus",
    "sqrt",
    "absolute",
    "leaky_relu",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "flip",
    "concat",
    "pad2d",
    "backward",
    "finite_diff_check",
]


class TensorError(Exception):
    """Base class for all tensor-engine failures."""


class ShapeError(TensorError):
    """Operands have incompatible shapes or dtypes."""


class NumericError(TensorError):
    """A primitive produced non-finite values or hit a numeric guard."""


class ContractError(TensorError):
    """An operation was called outside its contract."""


class ConfigError(TensorError):
    """A layer or model was configured inconsistently with its input."""


_FLOAT_DTYPES = (np.float32, np.float64)
_ids = itertools.count(1)


def _next_id() -> int:
    return next(_ids)


class Tensor:
    """Immutable dense array, optionally linked to a tape via ``grad_id``."""

    __slots__ = ("data", "grad_id")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype)  # owning copy: tensors never alias caller memory
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr.setflags(write=False)
        self.data = arr
        self.grad_id = _next_id() if requires_grad else None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(arr: np.ndarray) -> "Tensor":
        out = Tensor.__new__(Tensor)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        else:
            arr = arr.view()
        arr.setflags(write=False)
        out.data = arr
        out.grad_id = None
        return out

    def detach(self) -> "Tensor":
        """A view of the same values with no tape linkage."""
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        """Untracked dtype cast; used to move leaves between 32/64-bit modes."""
        return Tensor._wrap(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = "" if self.grad_id is None else f", grad_id={self.grad_id}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tracked})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype))


# -- tape ---------------------------------------------------------------------


class TapeNode:
    __slots__ = ("op", "out_id", "in_ids", "vjp")

    def __init__(self, op, out_id, in_ids, vjp):
        self.op = op
        self.out_id = out_id
        self.in_ids = in_ids
        self.vjp = vjp


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of primitive applications, replayed by backward().

    Single-writer: recording and backward belong to one logical thread.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.frozen = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


def apply_primitive(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], tuple],
    check_finite: bool = True,
) -> Tensor:
    """Wrap a forward result and record it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (or None
    for inputs that receive no gradient).  This is the extension point used
    by convolution, scan, and any other primitive defined outside this file.
    """
    if check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor._wrap(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.grad_id is not None for t in inputs):
        if tape.frozen:
            raise ContractError(f"cannot record '{op}': tape is frozen")
        out.grad_id = _next_id()
        tape.nodes.append(
            TapeNode(op, out.grad_id, tuple(t.grad_id for t in inputs), vjp)
        )
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep: gradients of ``loss`` w.r.t. every tracked tensor.

    Visits each node exactly once, in reverse recording order, accumulating
    additively across fan-out.  The tape is frozen afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.grad_id is None:
        raise ContractError("loss is not gradient-tracked (no grad_id)")
    if tape.frozen:
        raise ContractError("tape already consumed by a previous backward")
    tape.frozen = True

    grads: dict[int, np.ndarray] = {
        loss.grad_id: np.ones_like(loss.data)
    }
    for node in reversed(tape.nodes):
        g_out = grads.get(node.out_id)
        if g_out is None:
            continue
        g_ins = node.vjp(g_out)
        if g_ins is None:
            raise TensorError(f"primitive '{node.op}' has no derivative rule")
        for in_id, g in zip(node.in_ids, g_ins):
            if in_id is None or g is None:
                continue
            acc = grads.get(in_id)
            if acc is None:
                grads[in_id] = g if g.flags.owndata else g.copy()
            else:
                grads[in_id] = acc + g
    return {gid: Tensor._wrap(np.ascontiguousarray(g)) for gid, g in grads.items()}


# -- broadcasting helpers -----------------------------------------------------


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"'{op}': shapes {a.shape} and {b.shape} do not broadcast "
            "(trailing-dimension rule)"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient over axes that were broadcast in the forward."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"'{op}': dtype mismatch {a.dtype} vs {b.dtype}")


# -- pointwise unary ----------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(x):
    s = _sigmoid(x)
    return x * s, s


# kind -> (forward, vjp factory); vjp closes over (x, y, extras)
def _unary_rules():
    def relu_f(x):
        return np.maximum(x, 0), None

    def relu_d(x, y, _):
        # derivative at exactly 0 defined as 0
        return (x > 0).astype(x.dtype)

    def silu_f(x):
        y, s = _silu_fwd(x)
        return y, s

    def silu_d(x, y, s):
        return s * (1.0 + x * (1.0 - s))

    def tanh_f(x):
        return np.tanh(x), None

    def tanh_d(x, y, _):
        return 1.0 - y * y

    def exp_f(x):
        with np.errstate(over="ignore"):
            return np.exp(x), None

    def exp_d(x, y, _):
        return y

    def neg_f(x):
        return -x, None

    def neg_d(x, y, _):
        return np.array(-1.0, dtype=x.dtype)

    def sigmoid_f(x):
        return _sigmoid(x), None

    def sigmoid_d(x, y, _):
        return y * (1.0 - y)

    def softplus_f(x):
        return np.logaddexp(np.asarray(0.0, dtype=x.dtype), x), None

    def softplus_d(x, y, _):
        return _sigmoid(x)

    def sqrt_f(x):
        if np.any(x < 0):
            raise NumericError("sqrt of negative value")
        return np.sqrt(x), None

    def sqrt_d(x, y, _):
        return 0.5 / y

    def abs_f(x):
        return np.abs(x), None

    def abs_d(x, y, _):
        return np.sign(x)

    return {
        "relu": (relu_f, relu_d),
        "silu": (silu_f, silu_d),
        "tanh": (tanh_f, tanh_d),
        "exp": (exp_f, exp_d),
        "neg": (neg_f, neg_d),
        "sigmoid": (sigmoid_f, sigmoid_d),
        "softplus": (softplus_f, softplus_d),
        "sqrt": (sqrt_f, sqrt_d),
        "abs": (abs_f, abs_d),
    }


_UNARY = _unary_rules()
UNARY_KINDS = frozenset({"relu", "silu", "tanh", "exp", "neg", "sigmoid", "softplus"})


def _unary(op: str, x: Tensor) -> Tensor:
    fwd, deriv = _UNARY[op]
    y, ctx = fwd(x.data)

    def vjp(g):
        return (g * deriv(x.data, y, ctx),)

    return apply_primitive(op, y, (x,), vjp)


def map_unary(x: Tensor, kind: str) -> Tensor:
    """Pointwise unary map restricted to the supported activation kinds."""
    if kind not in UNARY_KINDS:
        raise ContractError(
            f"map_unary kind '{kind}' not in {sorted(UNARY_KINDS)}"
        )
    return _unary(kind, x)


def relu(x: Tensor) -> Tensor:
    return _unary("relu", x)


def silu(x: Tensor) -> Tensor:
    return _unary("silu", x)


def tanh(x: Tensor) -> Tensor:
    return _unary("tanh", x)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x)


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x)


def sigmoid(x: Tensor) -> Tensor:
    return _unary("sigmoid", x)


def softplus(x: Tensor) -> Tensor:
    return _unary("softplus", x)


def sqrt(x: Tensor) -> Tensor:
    return _unary("sqrt", x)


def absolute(x: Tensor) -> Tensor:
    return _unary("abs", x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = np.asarray(slope, dtype=x.dtype)
    y = np.where(x.data > 0, x.data, s * x.data)

    def vjp(g):
        return (g * np.where(x.data > 0, x.data.dtype.type(1), s),)

    return apply_primitive("leaky_relu", y, (x,), vjp)


# -- pointwise binary ---------------------------------------------------------

BINARY_KINDS = frozenset({"add", "sub", "mul", "div"})


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    _broadcast_shape("add", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return apply_primitive("add", y, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    _broadcast_shape("sub", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return apply_primitive("sub", y, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    _broadcast_shape("mul", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return apply_primitive("mul", y, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    _broadcast_shape("div", a, b)
    tiny = np.finfo(b.dtype).tiny
    if np.any(np.abs(b.data) < tiny):
        raise NumericError("div: divisor magnitude below machine-tiny")
    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return (
            _unbroadcast(ga, a.shape),
            _unbroadcast(-ga * y, b.shape),
        )

    return apply_primitive("div", y, (a, b), vjp)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def map_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind not in BINARY_KINDS:
        raise ContractError(
            f"map_binary kind '{kind}' not in {sorted(BINARY_KINDS)}"
        )
    return _BINARY[kind](a, b)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return apply_primitive("matmul", y, (a, b), vjp)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return apply_primitive("sum", np.asarray(y, dtype=x.dtype), (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    y = x.data.mean(axis=axes, keepdims=keepdims)
    inv = x.data.dtype.type(1.0 / count)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return apply_primitive("mean", np.asarray(y, dtype=x.dtype), (x,), vjp)


# -- movement / layout --------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return apply_primitive("reshape", y, (x,), vjp, check_finite=False)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return apply_primitive("transpose", y, (x,), vjp, check_finite=False)


def flip(x: Tensor, axis: int) -> Tensor:
    y = np.ascontiguousarray(np.flip(x.data, axis=axis))

    def vjp(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)

    return apply_primitive("flip", y, (x,), vjp, check_finite=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return apply_primitive("concat", y, tuple(tensors), vjp, check_finite=False)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the last two axes by ``pad`` on each side (zeros or reflect)."""
    if pad < 0:
        raise ContractError("pad must be non-negative")
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "zeros":
        y = np.pad(x.data, width, mode="constant")

        def vjp(g):
            sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
            return (np.ascontiguousarray(g[sl]),)

    elif mode == "reflect":
        if pad >= x.shape[-1] or pad >= x.shape[-2]:
            raise ShapeError(
                f"reflect pad {pad} too large for spatial extents {x.shape[-2:]}"
            )
        y = np.pad(x.data, width, mode="reflect")

        def vjp(g):
            # reflection is separable: fold the H borders, then the W borders
            gh = g[..., pad:-pad, :].copy()
            gh[..., 1 : pad + 1, :] += np.flip(g[..., :pad, :], axis=-2)
            gh[..., -pad - 1 : -1, :] += np.flip(g[..., -pad:, :], axis=-2)
            gw = gh[..., :, pad:-pad].copy()
            gw[..., :, 1 : pad + 1] += np.flip(gh[..., :, :pad], axis=-1)
            gw[..., :, -pad - 1 : -1] += np.flip(gh[..., :, -pad:], axis=-1)
            return (gw,)

    else:
        raise ContractError(f"unknown pad mode '{mode}'")

    return apply_primitive("pad2d", y, (x,), vjp, check_finite=False)


# -- gradient checking --------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: "Iterable[int] | None" = None,
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Coordinates where the one-sided differences disagree strongly (kinks,
    e.g. a ReLU input crossing zero within +-eps) are excluded from the max.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if not (0 < eps <= 1e-2):
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")

    def run(arr: np.ndarray) -> float:
        out = f(Tensor._wrap(arr))
        if out.data.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued f")
        return float(out.data.reshape(()))

    base = x.data.copy()
    f0 = run(base)
    if run(base) != f0:
        raise ContractError("f is not deterministic: two evaluations differ")

    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = f(xt)
    analytic = backward(tape, loss)[xt.grad_id].data.reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    noise_floor = 1e-12 * max(abs(f0), 1.0)  # secant below this has <4 digits
    max_err = 0.0
    for i in idx:
        orig = flat[i]

        def measure(e):
            flat[i] = orig + e
            fp = run(base)
            flat[i] = orig - e
            fm = run(base)
            flat[i] = orig
            return (fp - fm) / (2 * e), (fp - f0) / e, (f0 - fm) / e, abs(fp - fm)

        numeric, fwd, bwd, secant = measure(eps)
        if secant < noise_floor and eps < 1e-3:
            # resolution-limited coordinate: re-measure at a coarser step
            numeric, fwd, bwd, _ = measure(min(9e-3, eps * 300))
        if abs(fwd - bwd) > 0.3 * max(abs(fwd), abs(bwd), 1e-3):
            continue  # kink: one-sided slopes disagree
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
        if err > max_err:
            max_err = err
    return max_err
