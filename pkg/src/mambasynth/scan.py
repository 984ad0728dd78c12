"""Selective state-space scan machinery.

A first-order affine recurrence h[n] = a[n] * h[n-1] + b[n] underlies every
scan here.  Two interchangeable evaluation cores exist: a plain sequential
loop (the reference oracle) and a chunked core that exploits the associativity
of affine-map composition to cut Python-loop overhead to O(sqrt(L)) steps
while doing the same linear amount of arithmetic.

On top of the recurrence sit the input-dependent coefficient projections
(selectivity), the four row/column scan orderings of a 2-D feature grid, and
their merge.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Module, Parameter
from .tensor import ContractError, NumericError, ShapeError, Tensor, apply_primitive

__all__ = [
    "SSMParams",
    "SSMLayer",
    "DIRECTIONS",
    "discretize",
    "linear_scan",
    "gated_state_scan",
    "scan_sequential",
    "scan_fast",
    "selective_scan",
    "cross_scan",
    "cross_merge",
]

DIRECTIONS = ("row_forward", "row_reverse", "col_forward", "col_reverse")

# test hook: set to a direction name by the self-test fault injector
_FAULT: "str | None" = None


# -- recurrence cores (plain numpy) ---------------------------------------------


def _scan_core_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    acc = np.zeros(b.shape[1:], dtype=b.dtype)
    for n in range(b.shape[0]):
        acc = a[n] * acc + b[n]
        h[n] = acc
    return h


def _scan_core_chunked(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    length = a.shape[0]
    if length <= 2:
        return _scan_core_sequential(a, b)
    chunk = max(2, math.isqrt(length))
    k = -(-length // chunk)
    padded = k * chunk
    if padded != length:
        pad = ((0, padded - length),) + ((0, 0),) * (a.ndim - 1)
        a = np.pad(a, pad, constant_values=1)  # identity affine maps
        b = np.pad(b, pad, constant_values=0)
    rest = a.shape[1:]
    ac = a.reshape((k, chunk) + rest)
    bc = b.reshape((k, chunk) + rest)
    states = np.empty_like(bc)
    prods = np.empty_like(ac)
    acc_h = np.zeros((k,) + rest, dtype=b.dtype)
    acc_p = np.ones((k,) + rest, dtype=a.dtype)
    for t in range(chunk):
        acc_h = ac[:, t] * acc_h + bc[:, t]
        acc_p = acc_p * ac[:, t]
        states[:, t] = acc_h
        prods[:, t] = acc_p
    carry = np.zeros(rest, dtype=b.dtype)
    for i in range(k):
        if i:
            states[i] += prods[i] * carry
        carry = states[i, -1]
    return states.reshape((padded,) + rest)[:length]


_CORES = {"sequential": _scan_core_sequential, "chunked": _scan_core_chunked}


def _first_bad_index(h: np.ndarray) -> int:
    finite = np.isfinite(h.reshape(h.shape[0], -1)).all(axis=1)
    return int(np.argmin(finite))


def linear_scan(a: Tensor, b: Tensor, core: str = "chunked") -> Tensor:
    """Differentiable h[n] = a[n] * h[n-1] + b[n] along axis 0, h[-1] = 0.

    The adjoint is itself an affine recurrence run in reverse time, so the
    backward pass reuses the same core.
    """
    if a.shape != b.shape:
        raise ShapeError(f"linear_scan operands differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ContractError("linear_scan needs at least one step")
    run = _CORES[core]
    with np.errstate(over="ignore", invalid="ignore"):
        h = run(a.data, b.data)
    if not np.all(np.isfinite(h)):
        raise NumericError(f"non-finite scan state first at index {_first_bad_index(h)}")

    def vjp(g):
        # reverse-time recurrence: s[n] = g[n] + a[n+1] * s[n+1]
        a_rev = np.concatenate([np.ones_like(a.data[:1]), a.data[::-1][:-1]])
        s = run(a_rev, np.ascontiguousarray(g[::-1]))[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        return (np.ascontiguousarray(s * h_prev), np.ascontiguousarray(s))

    return apply_primitive("linear_scan", h, (a, b), vjp, check_finite=False)


# -- discretization ---------------------------------------------------------------


def discretize(a: Tensor, b_n: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for the state matrix, Euler rule for the input matrix.

    a_bar = exp(delta * a) elementwise, b_bar = delta * b_n, combined over a
    trailing (channel, state) grid: ``a`` is (C, N), ``delta`` (..., C) and
    ``b_n`` (..., N); both outputs are (..., C, N).
    """
    if np.any(delta.data <= 0):
        raise ContractError("discretize requires strictly positive delta")
    d_col = T.reshape(delta, delta.shape + (1,))
    a_bar = T.exp(T.mul(d_col, a))
    b_row = T.reshape(b_n, b_n.shape[:-1] + (1, b_n.shape[-1]))
    b_bar = T.mul(d_col, b_row)
    return a_bar, b_bar


# -- selective parameters ----------------------------------------------------------


class SSMParams(Module):
    """Learnable quantities for one scan direction over C channels.

    The state matrix is diagonal and negative (stored as log of its negation),
    the skip path is per-channel, and the input/output/step-size coefficients
    are per-token functions of the input sequence (the selective mechanism).
    """

    def __init__(self, channels: int, state_dim: int,
                 rng: "np.random.Generator | None" = None, dtype=np.float32,
                 delta_range: tuple[float, float] = (0.01, 0.1)):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.state_dim = state_dim
        a_init = np.tile(np.log(np.arange(1, state_dim + 1, dtype=np.float64)), (channels, 1))
        self.a_log = Parameter(a_init.astype(dtype))
        self.skip = Parameter(np.ones(channels, dtype=dtype))
        self.w_b = Parameter(rng.normal(0.0, 0.02, (channels, state_dim)).astype(dtype))
        self.b_b = Parameter(np.zeros(state_dim, dtype=dtype))
        self.w_c = Parameter(rng.normal(0.0, 0.02, (channels, state_dim)).astype(dtype))
        self.b_c = Parameter(np.zeros(state_dim, dtype=dtype))
        self.w_delta = Parameter(rng.normal(0.0, 0.02, (channels, channels)).astype(dtype))
        lo, hi = delta_range
        dt = np.exp(rng.uniform(np.log(lo), np.log(hi), channels))
        self.b_delta = Parameter(np.log(np.expm1(dt)).astype(dtype))  # softplus inverse

    def state_matrix(self) -> Tensor:
        return T.neg(T.exp(self.a_log.value))

    def token_coefficients(self, z: Tensor):
        """Per-token (a_bar, input_coeff, output_coeff) from sequence (L, ..., C)."""
        lead = z.shape[:-1]
        flat = T.reshape(z, (-1, self.channels))
        b_n = T.reshape(T.add(T.matmul(flat, self.w_b.value), self.b_b.value),
                        lead + (self.state_dim,))
        c_n = T.reshape(T.add(T.matmul(flat, self.w_c.value), self.b_c.value),
                        lead + (self.state_dim,))
        delta = T.softplus(T.add(T.matmul(flat, self.w_delta.value), self.b_delta.value))
        delta = T.reshape(delta, lead + (self.channels,))
        a_bar, b_bar = discretize(self.state_matrix(), b_n, delta)
        return a_bar, b_bar, c_n


def gated_state_scan(z: Tensor, delta: Tensor, b_in: Tensor, c_out: Tensor,
                     a_neg: Tensor, skip: Tensor, core: str = "chunked") -> Tensor:
    """Fused selective recurrence: discretize, scan, project, skip — one node.

    Shapes: z and delta (L, [R,] C); b_in and c_out (L, [R,] N); a_neg (C, N)
    negative-real; skip (C,).  Fusing keeps the (L, R, C, N) intermediates out
    of the tape and gives the backward pass a single analytic sweep instead of
    a dozen broadcast-multiply nodes.
    """
    if z.shape != delta.shape:
        raise ShapeError(f"z {z.shape} and delta {delta.shape} differ")
    if b_in.shape != c_out.shape or b_in.shape[:-1] != z.shape[:-1]:
        raise ShapeError(f"coefficient shapes {b_in.shape}/{c_out.shape} do not match {z.shape}")
    if z.ndim not in (2, 3):
        raise ShapeError(f"selective scan expects (L, C) or (L, R, C), got {z.shape}")
    if np.any(delta.data <= 0):
        raise ContractError("selective scan requires strictly positive delta")
    squeeze = z.ndim == 2
    expand = (lambda v: v[:, None]) if squeeze else (lambda v: v)
    zv, dv = expand(z.data), expand(delta.data)
    bv, cv = expand(b_in.data), expand(c_out.data)
    av, sv = a_neg.data, skip.data
    run = _CORES[core]

    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(dv[..., None] * av)                       # (L,R,C,N)
        bz = (dv * zv)[..., None] * bv[..., None, :]         # (L,R,C,N)
        h = run(a, bz)
        y = np.einsum("lrcn,lrn->lrc", h, cv) + zv * sv
    if not np.all(np.isfinite(h)) or not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite scan state first at index {_first_bad_index(h)}")

    def vjp(gy):
        gyv = expand(gy)
        gh = gyv[..., None] * cv[..., None, :]
        gc = np.einsum("lrcn,lrc->lrn", h, gyv)
        # reverse-time recurrence: s[l] = gh[l] + a[l+1] * s[l+1]
        a_rev = np.concatenate([np.ones_like(a[:1]), a[:0:-1]])
        s = run(a_rev, np.ascontiguousarray(gh[::-1]))[::-1]
        e = np.empty_like(s)                                  # s * h_prev * a
        e[0] = 0.0
        np.multiply(s[1:], h[:-1], out=e[1:])
        e[1:] *= a[1:]
        gdelta = np.einsum("lrcn,cn->lrc", e, av)
        g_a_neg = np.einsum("lrcn,lrc->cn", e, dv)
        t = np.einsum("lrcn,lrn->lrc", s, bv)
        gb = np.einsum("lrcn,lrc->lrn", s, dv * zv)
        gdelta += t * zv
        gz = gyv * sv + t * dv
        gskip = np.einsum("lrc,lrc->c", gyv, zv)
        if squeeze:
            gz, gdelta, gb, gc = gz[:, 0], gdelta[:, 0], gb[:, 0], gc[:, 0]
        return (gz, gdelta, gb, gc, g_a_neg, gskip)

    out = y[:, 0] if squeeze else y
    return apply_primitive("selective_scan", np.ascontiguousarray(out),
                           (z, delta, b_in, c_out, a_neg, skip), vjp,
                           check_finite=False)


def selective_scan(params: SSMParams, z: Tensor, core: str = "chunked") -> Tensor:
    """Input-selective recurrence over sequence (L, ..., C) -> same shape."""
    if z.shape[-1] != params.channels:
        raise ShapeError(f"sequence channels {z.shape[-1]} != params channels {params.channels}")
    lead = z.shape[:-1]
    flat = T.reshape(z, (-1, params.channels))
    b_n = T.reshape(T.add(T.matmul(flat, params.w_b.value), params.b_b.value),
                    lead + (params.state_dim,))
    c_n = T.reshape(T.add(T.matmul(flat, params.w_c.value), params.b_c.value),
                    lead + (params.state_dim,))
    delta = T.reshape(
        T.softplus(T.add(T.matmul(flat, params.w_delta.value), params.b_delta.value)),
        z.shape)
    return gated_state_scan(z, delta, b_n, c_n, params.state_matrix(),
                            params.skip.value, core=core)


def scan_sequential(params: SSMParams, z: Tensor) -> Tensor:
    """Reference oracle: step-by-step evaluation of the selective recurrence."""
    return selective_scan(params, z, core="sequential")


def scan_fast(params: SSMParams, z: Tensor) -> Tensor:
    """Chunked associative evaluation; numerically equivalent to the oracle."""
    return selective_scan(params, z, core="chunked")


# -- 2-D cross-scan ----------------------------------------------------------------


def cross_scan(x: Tensor) -> list[Tensor]:
    """Unroll a feature grid into the four row/column token orderings.

    Returns sequences shaped (L, C) for a (C, H, W) input or (L, B, C) for a
    batched input, ordered as :data:`DIRECTIONS`.
    """
    if x.ndim == 3:
        c, h, w = x.shape
        row = T.reshape(T.transpose(x, (1, 2, 0)), (h * w, c))
        col = T.reshape(T.transpose(x, (2, 1, 0)), (h * w, c))
    elif x.ndim == 4:
        b, c, h, w = x.shape
        row = T.reshape(T.transpose(x, (2, 3, 0, 1)), (h * w, b, c))
        col = T.reshape(T.transpose(x, (3, 2, 0, 1)), (h * w, b, c))
    else:
        raise ShapeError(f"cross_scan expects (C,H,W) or (B,C,H,W), got {x.shape}")
    return [row, T.flip(row, 0), col, T.flip(col, 0)]


def cross_merge(seqs: list[Tensor], grid_hw: tuple[int, int]) -> Tensor:
    """Inverse-permute each directional sequence to grid order and sum."""
    h, w = grid_hw
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge expects 4 sequences, got {len(seqs)}")
    for i, s in enumerate(seqs):
        if s.shape[0] != h * w:
            raise ShapeError(
                f"cross_merge: sequence {DIRECTIONS[i]} has length {s.shape[0]}, "
                f"grid needs {h * w}"
            )
    row, row_rev, col, col_rev = seqs
    batched = row.ndim == 3

    def from_row(seq):
        if batched:
            b, c = seq.shape[1], seq.shape[2]
            return T.transpose(T.reshape(seq, (h, w, b, c)), (2, 3, 0, 1))
        c = seq.shape[1]
        return T.transpose(T.reshape(seq, (h, w, c)), (2, 0, 1))

    def from_col(seq):
        if batched:
            b, c = seq.shape[1], seq.shape[2]
            return T.transpose(T.reshape(seq, (w, h, b, c)), (2, 3, 1, 0))
        c = seq.shape[1]
        return T.transpose(T.reshape(seq, (w, h, c)), (2, 1, 0))

    total = T.add(from_row(row), from_row(T.flip(row_rev, 0)))
    total = T.add(total, from_col(col))
    return T.add(total, from_col(T.flip(col_rev, 0)))


class SSMLayer(Module):
    """Four directional selective scans over a feature grid, summed.

    Each direction owns independent parameters unless ``share_directions``;
    ``core`` picks the recurrence evaluation (chunked by default, sequential
    for oracle comparisons).
    """

    def __init__(self, channels: int, state_dim: int = 16,
                 share_directions: bool = False, core: str = "chunked",
                 rng: "np.random.Generator | None" = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        n_param_sets = 1 if share_directions else 4
        self.scans = [SSMParams(channels, state_dim, rng=rng, dtype=dtype)
                      for _ in range(n_param_sets)]
        self.share_directions = share_directions
        self.core = core

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2], x.shape[-1]
        if h < 1 or w < 1:
            raise ShapeError("ssm layer needs a nonempty grid")
        seqs = cross_scan(x)
        outs = []
        for i, seq in enumerate(seqs):
            params = self.scans[i % len(self.scans)]
            out = selective_scan(params, seq, core=self.core)
            if _FAULT == DIRECTIONS[i] and self.core == "chunked":
                out = T.mul(out, Tensor._wrap(np.asarray(1.001, dtype=out.dtype)))
            outs.append(out)
        return cross_merge(outs, (h, w))
