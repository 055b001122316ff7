"""Gradient checks, oracle comparisons and micro-benchmarks by name.

Shared by the ``gradcheck``, ``oracle`` and ``bench`` subcommands and by the
test suite, so both exercise the same cases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import oracles
from . import tensor as tc
from .attention import AttentionConfig, CinST, CUnit, Parallel, Sequential, STinC, STUnit, build_attention
from .autodiff import BatchNorm, Node, Param
from .baselines import CBAM3D, GE3DG, S3DG, SE3D
from .tensor import Axis, Tensor
from .variants import AIA_LABELS, BASELINE_LABELS

Size = tuple[int, int, int, int]  # T, H, W, C
BATCH = 2
DEFAULT_SIZE: Size = (4, 5, 6, 3)
MODULE_SIZE: Size = (3, 4, 4, 2)
BASELINE_SIZE: Size = (2, 3, 3, 16)  # channel MLPs reduce by 16
FD_STEP = 1e-5


class UnknownCheckError(KeyError):
    def __init__(self, kind: str, name: str, valid):
        super().__init__(name)
        self.message = f"unknown {kind} {name!r}; valid names: {', '.join(valid)}"

    def __str__(self) -> str:
        return self.message


def parse_size(text: str) -> Size:
    """``"T,H,W,C"`` -> tuple of four positive ints."""
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 4:
        raise ValueError(f"size must be T,H,W,C, got {text!r}")
    vals = tuple(int(p) for p in parts)
    if min(vals) < 1:
        raise ValueError(f"size entries must be positive, got {text!r}")
    return vals


def _video(rng, size: Size, batch: int = BATCH) -> np.ndarray:
    t, h, w, c = size
    return rng.standard_normal((batch, c, t, h, w))


# ---------------------------------------------------------------------------
# gradient cases: leaves plus a closure that rebuilds the graph from them
# ---------------------------------------------------------------------------

@dataclass
class Case:
    leaves: list[Param]
    forward: Callable[[], Node]


def _x(rng, size) -> Param:
    return Param(Tensor(_video(rng, size)), "x")


def _unary(op):
    def make(rng, size):
        x = _x(rng, size)
        return Case([x], lambda: op(x))
    return make


def _binary(op):
    def make(rng, size):
        a, b = _x(rng, size), _x(rng, size)
        return Case([a, b], lambda: op(a, b))
    return make


def _pool_all(mode):
    def op(x):
        out = None
        for axis in (Axis.C, Axis.T, Axis.H, Axis.W):
            y = ad.total(ad.pool(x, axis, mode)) if mode == "avg" else ad.square_sum(ad.pool(x, axis, mode))
            out = y if out is None else ad.add(out, y)
        return out
    return op


def _concat_case(rng, size):
    a, b = _x(rng, size), _x(rng, size)

    def fwd():
        outs = [ad.square_sum(ad.concat(a, b, axis)) for axis in (Axis.C, Axis.T, Axis.H, Axis.W)]
        return ad.add(ad.add(outs[0], outs[1]), ad.add(outs[2], outs[3]))
    return Case([a, b], fwd)


def _expand_case(rng, size):
    t, h, w, c = size
    y = Param(Tensor(rng.standard_normal((BATCH, c, 1, h, w))), "y")
    return Case([y], lambda: ad.expand(y, Axis.T, t))


def _conv3_case(rng, size):
    # gate-like: pooled axis of extent 2 as channels, one output map
    x = _x(rng, size)
    k = Param(rng.standard_normal((1, 2, 3, 3, 3)), "kernel")

    def fwd():
        ctx = ad.concat(ad.pool(x, Axis.T, "avg"), ad.pool(x, Axis.T, "max"), Axis.T)
        return ad.conv3(ctx, k, Axis.T, (Axis.C, Axis.H, Axis.W))
    return Case([x, k], fwd)


def _conv3_multi_case(rng, size):
    x = _x(rng, size)
    k = Param(rng.standard_normal((2, size[3], 3, 3, 3)), "kernel")
    return Case([x, k], lambda: ad.conv3(x, k, Axis.C, (Axis.T, Axis.H, Axis.W)))


def _conv2_case(rng, size):
    c = size[3]
    x = _x(rng, size)
    w = Param(rng.standard_normal((2, c, 3, 3)), "weight")
    b = Param(rng.standard_normal(2), "bias")
    return Case([x, w, b], lambda: ad.add(ad.total(ad.conv2(x, w, b, 1)), ad.square_sum(ad.conv2(x, w, None, 2))))


def _linear_case(rng, size):
    c = size[3]
    x = _x(rng, size)
    w = Param(rng.standard_normal((3, c)), "weight")
    b = Param(rng.standard_normal(3), "bias")
    return Case([x, w, b], lambda: ad.linear(x, w, b, Axis.C))


def _bn_case(rng, size):
    c = size[3]
    x = _x(rng, size)
    bn = BatchNorm(c, Axis.C, "train")
    bn.gamma.assign(rng.uniform(0.5, 1.5, c))
    bn.beta.assign(rng.standard_normal(c))
    return Case([x, bn.gamma, bn.beta], lambda: bn(x))


def _ce_case(rng, size):
    k = size[3]
    z = Param(Tensor(rng.standard_normal((4, k, 1, 1, 1))), "logits")
    labels = rng.integers(0, k, 4)
    return Case([z], lambda: ad.cross_entropy(z, labels))


def _shift_case(rng, size):
    t, h, w, c = size
    x = _x(rng, (t, h, w, max(c, 8)))
    return Case([x], lambda: ad.temporal_shift(x, 0.125))


PRIMITIVES: dict[str, Callable] = {
    "pool_avg": _unary(_pool_all("avg")),
    "pool_max": _unary(_pool_all("max")),
    "concat": _concat_case,
    "expand": _expand_case,
    "mul": _binary(ad.mul),
    "add": _binary(ad.add),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu),
    "avgpool_global": _unary(lambda x: ad.avgpool_global(x, (Axis.T, Axis.H, Axis.W))),
    "temporal_shift": _shift_case,
    "conv3": _conv3_case,
    "conv3_multi": _conv3_multi_case,
    "conv2": _conv2_case,
    "linear": _linear_case,
    "batchnorm": _bn_case,
    "cross_entropy": _ce_case,
}
MODULES = tuple(v for v in (*AIA_LABELS, *BASELINE_LABELS))
GRADCHECK_NAMES = tuple(PRIMITIVES) + MODULES


def _randomize_bn(module, rng) -> None:
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.gamma.assign(rng.uniform(0.5, 1.5, m.channels))
            m.beta.assign(0.3 * rng.standard_normal(m.channels))


def default_size(name: str) -> Size:
    if name in BASELINE_LABELS:
        return BASELINE_SIZE
    return MODULE_SIZE if name in AIA_LABELS else DEFAULT_SIZE


def make_case(name: str, rng: np.random.Generator, size: Size | None = None,
              bn_mode: str = "train") -> Case:
    size = size or default_size(name)
    if name in PRIMITIVES:
        return PRIMITIVES[name](rng, size)
    if name in MODULES:
        module = build_attention(AttentionConfig(name, bn_mode=bn_mode), size[3], rng)
        _randomize_bn(module, rng)
        x = _x(rng, size)
        return Case([x] + module.params(), lambda: module(x))
    raise UnknownCheckError("module", name, GRADCHECK_NAMES)


@dataclass
class GradcheckResult:
    name: str
    seed: int
    max_rel_error: float
    entries: int


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Worst per-leaf ``max|a - n| / max|a|, |n|``.

    Each leaf's denominator is floored at 1e-3 of the largest gradient
    overall so that leaves whose true gradient is tiny do not amplify
    finite-difference noise; exactly-zero pairs count as zero error.
    """
    overall = max((max(np.abs(a).max(), np.abs(n).max()) for a, n in zip(analytic, numeric) if a.size), default=0.0)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if not a.size:
            continue
        diff = np.abs(a - n).max()
        if diff == 0.0:
            continue
        denom = max(np.abs(a).max(), np.abs(n).max(), 1e-3 * overall)
        worst = max(worst, diff / denom)
    return float(worst)


def gradcheck(name: str, seed: int = 0, size: Size | None = None, step: float = FD_STEP,
              bn_mode: str = "train", max_param_entries: int | None = None) -> GradcheckResult:
    """Analytic gradients vs central differences of a random linear readout.

    Every entry of the inputs is checked.  ``max_param_entries`` caps how
    many seeded coordinates of each larger parameter leaf are perturbed.
    """
    rng = np.random.default_rng(seed)
    case = make_case(name, rng, size, bn_mode)
    probe = rng.standard_normal(case.forward().shape)

    def loss() -> Node:
        return ad.weighted_sum(case.forward(), probe)

    for p in case.leaves:
        p.zero_grad()
    ad.backward(loss())
    analytic, numeric = [], []
    for p in case.leaves:
        orig = p.data.copy()
        idx = np.arange(orig.size)
        if max_param_entries is not None and p.name != "x" and orig.size > max_param_entries:
            idx = np.sort(rng.choice(orig.size, max_param_entries, replace=False))

        def f(t: Tensor, p=p) -> float:
            p.assign(t.data)
            return float(loss().data[0])
        numeric.append(ad.finite_diff_entries(f, Tensor(orig, None), idx, step))
        analytic.append(p.grad.reshape(-1)[idx])
        p.assign(orig)
    entries = sum(a.size for a in analytic)
    return GradcheckResult(name, seed, relative_error(analytic, numeric), entries)


# ---------------------------------------------------------------------------
# oracle comparisons
# ---------------------------------------------------------------------------

ORACLE_SHAPE = (2, 8, 4, 8, 8)  # N, C, T, H, W


def _bn_arg(gate):
    bn = gate.bn
    if bn.mode == "bypass":
        return None
    if bn.mode != "train":
        raise ValueError("the straight-line reference only covers train and bypass BN")
    return float(bn.gamma.data[0]), float(bn.beta.data[0])


def _st_args(st: STUnit):
    return [g.kernel.data for g in st.gates], tuple(_bn_arg(g) for g in st.gates)


def _bn_cbam(bn: BatchNorm):
    return None if bn.mode == "bypass" else (float(bn.gamma.data[0]), float(bn.beta.data[0]))


def reference(module, x: np.ndarray) -> np.ndarray:
    """Evaluate an attention module with the straight-line formulas in :mod:`aia.oracles`."""
    if isinstance(module, CUnit):
        return oracles.c_unit(x, module.gate.kernel.data, _bn_arg(module.gate))
    if isinstance(module, STUnit):
        ks, bns = _st_args(module)
        return oracles.st_unit(x, *ks, bns)
    if isinstance(module, CinST):
        ks, bns = _st_args(module.st)
        return oracles.cinst(x, module.c.gate.kernel.data, *ks, _bn_arg(module.c.gate), bns)
    if isinstance(module, STinC):
        ks, bns = _st_args(module.st)
        return oracles.stinc(x, *ks, module.c.gate.kernel.data, bns, _bn_arg(module.c.gate))
    if isinstance(module, Sequential):
        return reference(module.second, reference(module.first, x))
    if isinstance(module, Parallel):
        return 0.5 * (reference(module.a, x) + reference(module.b, x))
    if isinstance(module, SE3D):
        return oracles.se3d(x, module.w1.data, module.b1.data, module.w2.data, module.b2.data)
    if isinstance(module, GE3DG):
        return oracles.ge3d_g(x)
    if isinstance(module, S3DG):
        return oracles.s3d_g(x, module.weight.data, module.bias.data)
    if isinstance(module, CBAM3D):
        return oracles.cbam3d(x, module.w1.data, module.b1.data, module.w2.data, module.b2.data,
                              module.kernel.data, _bn_cbam(module.bn))
    raise TypeError(f"no reference formula for {type(module).__name__}")


def _max_dev(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _draw(rng, shape, zero: bool) -> np.ndarray:
    return np.zeros(shape) if zero else rng.standard_normal(shape)


def _oracle_pool(rng, zero, shape):
    x = Tensor(_draw(rng, shape, zero))
    return max(_max_dev(tc.pool_along(x, a, m).data, oracles.pool(x, a, m).data)
               for a in (Axis.C, Axis.T, Axis.H, Axis.W) for m in ("avg", "max"))


def _oracle_concat(rng, zero, shape):
    a, b = Tensor(_draw(rng, shape, zero)), Tensor(_draw(rng, shape, zero))
    return max(_max_dev(tc.concat_along(a, b, ax).data, oracles.concat(a, b, ax).data)
               for ax in (Axis.C, Axis.T, Axis.H, Axis.W))


def _oracle_expand(rng, zero, shape):
    dev = 0.0
    for k, ax in enumerate((Axis.C, Axis.T, Axis.H, Axis.W), start=1):
        s = list(shape)
        s[k] = 1
        y = Tensor(_draw(rng, s, zero))
        dev = max(dev, _max_dev(tc.expand_along(y, ax, shape[k]).data, oracles.expand(y, ax, shape[k]).data))
    return dev


def _oracle_elementwise(rng, zero, shape):
    a, b = Tensor(_draw(rng, shape, zero)), Tensor(_draw(rng, shape, zero))
    return max(_max_dev(tc.elementwise(a, b, op).data, oracles.elementwise(a, b, op).data) for op in ("mul", "add"))


def _oracle_sigmoid(rng, zero, shape):
    x = Tensor(3.0 * _draw(rng, shape, zero))
    return _max_dev(tc.map_sigmoid(x).data, oracles.sigmoid(x).data)


def _oracle_conv3(rng, zero, shape):
    x = Tensor(_draw(rng, shape, zero))
    k = rng.standard_normal((2, shape[1], 3, 3, 3))
    slide = (Axis.T, Axis.H, Axis.W)
    dev = _max_dev(tc.conv3_over(x, k, Axis.C, slide).data, oracles.conv3(x, k, Axis.C, slide).data)
    # gate layout: a 2-slot T axis as channels, sliding over C, H, W
    s = list(shape)
    s[2] = 2
    g = Tensor(_draw(rng, s, zero))
    kg = rng.standard_normal((1, 2, 3, 3, 3))
    slide = (Axis.C, Axis.H, Axis.W)
    return max(dev, _max_dev(tc.conv3_over(g, kg, Axis.T, slide).data, oracles.conv3(g, kg, Axis.T, slide).data))


def _oracle_conv2(rng, zero, shape):
    x = Tensor(_draw(rng, shape, zero))
    w = rng.standard_normal((4, shape[1], 3, 3))
    b = rng.standard_normal(4)
    return max(_max_dev(tc.conv2_spatial(x, w, b, s).data, oracles.conv2(x, w, b, s).data) for s in (1, 2))


def _oracle_shift(rng, zero, shape):
    x = Tensor(_draw(rng, shape, zero))
    return max(_max_dev(tc.temporal_shift(x, f).data, oracles.temporal_shift(x, f).data) for f in (0.125, 0.25))


def _oracle_module(name):
    def run(rng, zero, shape):
        module = build_attention(AttentionConfig(name, bn_mode="train"), shape[1], rng)
        _randomize_bn(module, rng)
        x = _draw(rng, shape, zero)
        got = module(ad.constant(Tensor(x))).data
        return _max_dev(got, reference(module, x))
    return run


ORACLE_OPS: dict[str, Callable] = {
    "pool": _oracle_pool,
    "concat": _oracle_concat,
    "expand": _oracle_expand,
    "elementwise": _oracle_elementwise,
    "sigmoid": _oracle_sigmoid,
    "conv3": _oracle_conv3,
    "conv2": _oracle_conv2,
    "temporal_shift": _oracle_shift,
    **{v: _oracle_module(v) for v in MODULES},
}


def oracle_deviation(op: str, seed: int = 0, zero: bool = False, shape=None) -> float:
    """Max absolute deviation between the kernel and its independent reference."""
    if op not in ORACLE_OPS:
        raise UnknownCheckError("op", op, ORACLE_OPS)
    shape = tuple(shape or ORACLE_SHAPE)
    if op in BASELINE_LABELS and shape[1] % 16:
        shape = (shape[0], 16) + shape[2:]
    return ORACLE_OPS[op](np.random.default_rng(seed), zero, shape)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    name: str
    forward: list[float]
    forward_backward: list[float]

    @property
    def median_forward(self) -> float:
        return float(np.median(self.forward))

    @property
    def median_forward_backward(self) -> float:
        return float(np.median(self.forward_backward))


def bench(name: str, size: Size | None = None, iters: int = 10, seed: int = 0) -> BenchResult:
    if iters < 1:
        raise ValueError("iters must be at least 1")
    case = make_case(name, np.random.default_rng(seed), size)
    fwd, both = [], []
    for _ in range(iters):
        t0 = time.perf_counter()
        out = case.forward()
        t1 = time.perf_counter()
        ad.backward(ad.total(case.forward()) if out.value.data.size > 1 else case.forward())
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        both.append(t2 - t1)
        for p in case.leaves:
            p.zero_grad()
    return BenchResult(name, fwd, both)
