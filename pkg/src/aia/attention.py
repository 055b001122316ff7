"""Axial-context attention units and their attention-in-attention compositions.

A context squeezes one axis of an ``N,C,T,H,W`` feature into an (avg, max)
pair.  Each gate treats that 2-slot axis as the input channels of a 3x3x3
convolution over the three remaining axes, so every gate conv holds 54
weights.  Units multiply their gate into the feature; the AIA modules use
the inner unit's output only to build contexts and always gate the
original input.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Module, Node, Param
from .tensor import CONTEXT_AXES, Axis, ShapeError
from .variants import AIA_LABELS, BASELINE_LABELS, UnknownVariantError, canonical

GATE_KERNEL_SHAPE = (1, 2, 3, 3, 3)


class ContextPair(NamedTuple):
    """Avg (slot 0) and max (slot 1) of a feature pooled along ``axis``."""

    node: Node
    axis: Axis
    extent: int  # extent of ``axis`` before squeezing


def sliding_axes(axis: Axis) -> tuple[Axis, Axis, Axis]:
    return tuple(a for a in CONTEXT_AXES if a != axis)


def build_context(x: Node, axis: Axis | str) -> ContextPair:
    axis = Axis(axis)
    if axis not in CONTEXT_AXES:
        raise ValueError(f"contexts squeeze one of C,T,H,W, not {axis}")
    extent = x.value.extent(axis)
    g = ad.concat(ad.pool(x, axis, "avg"), ad.pool(x, axis, "max"), axis)
    return ContextPair(g, axis, extent)


def init_gate_kernel(rng: np.random.Generator, shape=GATE_KERNEL_SHAPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GateConv(Module):
    """Kernel plus BN for one squeezed axis."""

    def __init__(self, axis: Axis, rng: np.random.Generator | None = None, bn_mode: str = "train",
                 name: str = "gate"):
        self.axis = Axis(axis)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = Param(init_gate_kernel(rng), f"{name}.kernel")
        self.bn = BatchNorm(1, channel_axis=self.axis, mode=bn_mode, name=f"{name}.bn")


def unit_gate(ctx: ContextPair, gate: GateConv) -> Node:
    """conv3 -> BN -> sigmoid -> expand back to the pre-squeeze extent."""
    if gate.kernel.shape != GATE_KERNEL_SHAPE:
        raise ShapeError(f"gate kernel must be {GATE_KERNEL_SHAPE}, got {gate.kernel.shape}")
    if gate.axis != ctx.axis:
        raise ValueError(f"gate for axis {gate.axis} applied to a {ctx.axis} context")
    y = ad.conv3(ctx.node, gate.kernel, ctx.axis, sliding_axes(ctx.axis))
    y = gate.bn(y)
    y = ad.sigmoid(y)
    return ad.expand(y, ctx.axis, ctx.extent)


class Attention(Module):
    """Base for gating modules: ``forward(x) == gate_map(x) * x`` for single stages."""

    def gate_map(self, x: Node) -> Node:
        raise NotImplementedError

    def forward(self, x: Node) -> Node:
        return ad.mul(self.gate_map(x), x)


class CUnit(Attention):
    def __init__(self, rng=None, bn_mode="train", name="c"):
        self.gate = GateConv(Axis.C, rng, bn_mode, f"{name}.gate_c")

    def gate_map(self, x: Node) -> Node:
        return unit_gate(build_context(x, Axis.C), self.gate)


class STUnit(Attention):
    def __init__(self, rng=None, bn_mode="train", name="st"):
        self.gates = [GateConv(a, rng, bn_mode, f"{name}.gate_{a.value.lower()}") for a in (Axis.T, Axis.H, Axis.W)]

    def gate_map(self, x: Node) -> Node:
        yt, yh, yw = (unit_gate(build_context(x, g.axis), g) for g in self.gates)
        return ad.scale(ad.add(ad.add(yt, yh), yw), 1.0 / 3.0)


class CinST(Attention):
    """ST host whose contexts come from the C-refined feature."""

    def __init__(self, rng=None, bn_mode="train", name="cinst"):
        self.c = CUnit(rng, bn_mode, f"{name}.c")
        self.st = STUnit(rng, bn_mode, f"{name}.st")

    def gate_map(self, x: Node) -> Node:
        return self.st.gate_map(self.c(x))


class STinC(Attention):
    """C host whose context comes from the ST-refined feature."""

    def __init__(self, rng=None, bn_mode="train", name="stinc"):
        self.st = STUnit(rng, bn_mode, f"{name}.st")
        self.c = CUnit(rng, bn_mode, f"{name}.c")

    def gate_map(self, x: Node) -> Node:
        return self.c.gate_map(self.st(x))


class Sequential(Module):
    def __init__(self, first: Module, second: Module):
        self.first = first
        self.second = second

    def forward(self, x: Node) -> Node:
        return self.second(self.first(x))


class Parallel(Module):
    """Both branches see the same input; outputs are averaged."""

    def __init__(self, a: Module, b: Module):
        self.a = a
        self.b = b

    def forward(self, x: Node) -> Node:
        return ad.scale(ad.add(self.a(x), self.b(x)), 0.5)


PARALLEL_COMBINERS = ("mean_of_outputs",)


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    variant: str = "none"
    bn_mode: str = "train"
    parallel_combiner: str = "mean_of_outputs"
    width: str = "reduced"  # insertion width, only consulted by the analyzer for baselines

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical(self.variant))
        if self.bn_mode not in ad.BN_MODES:
            raise ValueError(f"unknown BN mode {self.bn_mode!r}")
        if self.parallel_combiner not in PARALLEL_COMBINERS:
            raise ValueError(f"unknown parallel combiner {self.parallel_combiner!r}")
        if self.width not in ("reduced", "full"):
            raise ValueError(f"width must be 'reduced' or 'full', got {self.width!r}")

    @property
    def label(self) -> str:
        from .variants import LABELS
        return LABELS[self.variant]


_AIA_BUILDERS = {
    "c": lambda rng, m: CUnit(rng, m, "c"),
    "st": lambda rng, m: STUnit(rng, m, "st"),
    "c_st_seq": lambda rng, m: Sequential(CUnit(rng, m, "c"), STUnit(rng, m, "st")),
    "st_c_seq": lambda rng, m: Sequential(STUnit(rng, m, "st"), CUnit(rng, m, "c")),
    "c_st_par": lambda rng, m: Parallel(CUnit(rng, m, "c"), STUnit(rng, m, "st")),
    "cinst": lambda rng, m: CinST(rng, m, "cinst"),
    "stinc": lambda rng, m: STinC(rng, m, "stinc"),
    "cinst_stinc_seq": lambda rng, m: Sequential(CinST(rng, m, "cinst"), STinC(rng, m, "stinc")),
    "stinc_cinst_seq": lambda rng, m: Sequential(STinC(rng, m, "stinc"), CinST(rng, m, "cinst")),
    "cinst_stinc_par": lambda rng, m: Parallel(CinST(rng, m, "cinst"), STinC(rng, m, "stinc")),
}


class Identity(Module):
    def forward(self, x: Node) -> Node:
        return x


def build_attention(config: AttentionConfig | str, channels: int | None = None,
                    rng: np.random.Generator | None = None) -> Module:
    """Instantiate a variant with fresh, independent parameters.

    ``channels`` is needed only by the channel-MLP baselines.
    """
    if isinstance(config, str):
        config = AttentionConfig(config)
    rng = rng if rng is not None else np.random.default_rng(0)
    v = config.variant
    if v == "none":
        return Identity()
    if v in AIA_LABELS:
        return _AIA_BUILDERS[v](rng, config.bn_mode)
    if v in BASELINE_LABELS:
        from . import baselines
        if channels is None:
            raise ValueError(f"{v} needs the channel count")
        return baselines.build(v, channels, rng, config.bn_mode)
    raise UnknownVariantError(v)


def combine(x: Node, config: AttentionConfig | str, module: Module | None = None,
            rng: np.random.Generator | None = None) -> Node:
    """Run ``x`` through the configured topology (built on the fly if needed)."""
    if module is None:
        module = build_attention(config, x.value.extent(Axis.C), rng)
    return module(x)


def attach_to_bottleneck(block, config: AttentionConfig | str):
    """Return a copy of a bottleneck descriptor with attention after its 3x3 conv."""
    from .complexity import Bottleneck
    if not isinstance(block, Bottleneck):
        raise TypeError(f"attention attaches to Bottleneck descriptors, got {type(block).__name__}")
    if isinstance(config, str):
        config = AttentionConfig(config)
    return dataclasses.replace(block, attention=None if config.variant == "none" else config)
