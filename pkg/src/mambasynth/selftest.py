"""Built-in verification suites exposed through the command line.

Three suites: "scan" (recurrence oracle equivalence and merge inverses),
"grad" (finite-difference checks over the differentiable primitives and
blocks), and "shape" (architecture conformance and identity invariants).
Each returns named pass/fail results; any failure makes the command exit
nonzero.
"""

from __future__ import annotations

import numpy as np

from . import scan as scan_mod
from . import tensor as T
from .blocks import MambaMixerBlock, ResidualConvBlock, detokenize, tokenize
from .discriminator import PatchDiscriminator
from .generator import GeneratorConfig, build_generator
from .layers import BatchNorm2D, Conv2D, conv2d, conv2d_transpose
from .scan import SSMLayer, SSMParams, cross_merge, cross_scan, scan_fast, scan_sequential
from .tensor import Tensor, finite_diff_check

SUITES = ("scan", "grad", "shape")

Result = tuple[str, bool, str]


def _t(x):
    return Tensor(x, dtype=np.float64)


def _random_scan_params(rng, channels, state_dim):
    p = SSMParams(channels, state_dim, rng=rng, dtype=np.float64)
    p.a_log.assign(rng.normal(0.0, 1.0, (channels, state_dim)))
    p.w_b.assign(rng.normal(0.0, 0.5, (channels, state_dim)))
    p.b_b.assign(rng.normal(0.0, 0.5, state_dim))
    p.w_c.assign(rng.normal(0.0, 0.5, (channels, state_dim)))
    p.b_c.assign(rng.normal(0.0, 0.5, state_dim))
    p.w_delta.assign(rng.normal(0.0, 0.2, (channels, channels)))
    p.b_delta.assign(rng.uniform(-4.0, 0.5, channels))
    p.skip.assign(rng.normal(0.0, 1.0, channels))
    return p


def scan_suite(cases: int = 80) -> list[Result]:
    results: list[Result] = []
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(cases):
        length = int(rng.choice([1, 2, 7, 33, 128, 700]))
        channels = int(rng.integers(1, 5))
        state_dim = int(rng.choice([1, 8, 16]))
        params = _random_scan_params(rng, channels, state_dim)
        z = _t(rng.normal(size=(length, channels)))
        ref = scan_sequential(params, z).data
        fast = scan_fast(params, z).data
        worst = max(worst, float(np.max(np.abs(ref - fast))))
    results.append(("scan_oracle_equivalence", worst <= 1e-10,
                    f"max abs deviation {worst:.3e} over {cases} cases"))

    x = _t(rng.normal(size=(3, 6, 5)))
    merged = cross_merge(cross_scan(x), (6, 5))
    ok = bool(np.allclose(merged.data, 4 * x.data, rtol=1e-13, atol=1e-13))
    results.append(("cross_merge_four_identity", ok, "merge o scan == 4 x identity"))

    layer_fast = SSMLayer(2, 4, core="chunked", rng=np.random.default_rng(5), dtype=np.float64)
    layer_slow = SSMLayer(2, 4, core="sequential", rng=np.random.default_rng(5), dtype=np.float64)
    grid = _t(rng.normal(size=(1, 2, 8, 9)))
    dev = float(np.max(np.abs(layer_fast(grid).data - layer_slow(grid).data)))
    results.append(("layer_backend_equivalence", dev <= 1e-10,
                    f"fast vs sequential layer deviation {dev:.3e}"))

    p = _random_scan_params(np.random.default_rng(9), 1, 1)
    p.a_log.assign(np.full((1, 1), np.log(0.1)))
    p.w_delta.assign(np.zeros((1, 1)))
    p.b_delta.assign(np.array([np.log(np.expm1(0.05))]))
    p.w_b.assign(np.zeros((1, 1)))
    p.b_b.assign(np.ones(1))
    p.w_c.assign(np.zeros((1, 1)))
    p.b_c.assign(np.ones(1))
    p.skip.assign(np.zeros(1))
    z = _t(np.ones((2048, 1)))
    out = scan_fast(p, z).data
    bound = 0.05 / (1 - np.exp(-0.1 * 0.05)) + 1e-6
    results.append(("stability_bound", bool(np.max(np.abs(out)) <= bound),
                    f"max state {np.max(np.abs(out)):.4f} vs bound {bound:.4f}"))
    return results


def grad_suite() -> list[Result]:
    results: list[Result] = []
    rng = np.random.default_rng(7)

    def check(name, f, x0, tol=1e-4):
        err = finite_diff_check(f, _t(x0))
        results.append((name, err <= tol, f"max relative error {err:.3e}"))

    x0 = rng.normal(size=(6,))
    for kind in ("silu", "tanh", "sigmoid", "softplus", "exp"):
        check(f"unary_{kind}", lambda t, k=kind: T.reduce_sum(T.map_unary(t, k)), x0)

    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    check("matmul", lambda t: T.reduce_sum(T.matmul(t, _t(b0))), a0)

    w0 = rng.normal(size=(3, 2, 3, 3))
    xc = rng.normal(size=(1, 2, 6, 6))
    r = rng.normal(size=(1, 3, 6, 6))
    check("conv2d", lambda t: T.reduce_sum(T.mul(conv2d(t, _t(w0), None, 1, 1), _t(r))), xc)
    wt = rng.normal(size=(2, 3, 4, 4))
    rt = rng.normal(size=(1, 3, 12, 12))
    check("conv2d_transpose",
          lambda t: T.reduce_sum(T.mul(conv2d_transpose(t, _t(wt), None, 2, 1), _t(rt))), xc)

    bn = BatchNorm2D(2, dtype=np.float64)
    xbn = rng.normal(size=(2, 2, 4, 4))
    rbn = rng.normal(size=(2, 2, 4, 4))
    check("batchnorm", lambda t: T.reduce_sum(T.mul(bn(t), _t(rbn))), xbn)

    blk = MambaMixerBlock(2, state_dim=2, rng=np.random.default_rng(3), dtype=np.float64)
    check("mixer_block", lambda t: T.reduce_sum(blk(t)), rng.normal(size=(1, 2, 4, 4)))

    res = ResidualConvBlock(2, rng=np.random.default_rng(4), dtype=np.float64).eval()
    check("residual_block", lambda t: T.reduce_sum(res(t)), rng.normal(size=(1, 2, 4, 4)))
    return results


def shape_suite() -> list[Result]:
    results: list[Result] = []
    rng = np.random.default_rng(11)

    cfg = GeneratorConfig(num_sources=2, height=32, width=32, channels=16, stages=5,
                          state_dim=2, dtype="float64")
    gen = build_generator(cfg, seed=0).eval()
    x = _t(rng.normal(size=(1, 2, 32, 32)))
    _, _, latent = gen.encode(x)
    results.append(("encoder_latent_shape", latent.shape == (1, 16, 8, 8),
                    f"latent {latent.shape}, expected (1, 16, 8, 8)"))
    trace = []
    y = gen(x, trace=trace)
    results.append(("output_shape", y.shape == (1, 1, 32, 32), f"output {y.shape}"))
    mixer_stages = [j for kind, j in trace if kind == "mixer"]
    results.append(("mixer_routing", mixer_stages == [1, 3, 5],
                    f"mixer blocks ran at stages {mixer_stages}"))
    results.append(("output_bounded", bool(np.max(np.abs(y.data)) <= 1.0),
                    "tanh output range"))

    gen.zero_residual_projections()
    latent_in = _t(rng.normal(size=(1, 16, 8, 8)))
    out = gen.bottleneck(latent_in)
    dev = float(np.max(np.abs(out.data - latent_in.data)))
    results.append(("bottleneck_identity", dev <= 1e-10,
                    f"zeroed projections deviation {dev:.3e}"))

    arr = rng.normal(size=(1, 3, 8, 8))
    round_trip = detokenize(tokenize(_t(arr), 2), 3, (4, 4), 2).data
    results.append(("tokenize_roundtrip", bool(np.array_equal(round_trip, arr)),
                    "bitwise lossless"))

    disc = PatchDiscriminator(1, base_width=4, rng=rng, dtype=np.float64)
    rf = disc.receptive_field()
    results.append(("discriminator_receptive_field", rf == (70, 8, -23), f"{rf}"))
    return results


def run_suites(names=SUITES) -> list[Result]:
    out: list[Result] = []
    for name in names:
        suite = {"scan": scan_suite, "grad": grad_suite, "shape": shape_suite}[name]
        out.extend((f"{name}.{n}", ok, detail) for n, ok, detail in suite())
    return out


def inject_fault(target: str) -> None:
    """Perturb one scan direction (test harness for the self-test command)."""
    scan_mod._FAULT = "row_reverse" if target == "scan" else None
