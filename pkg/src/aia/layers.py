"""Trainable backbone layers and an executable bottleneck block."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import build_attention
from .autodiff import BatchNorm, Module, Node, Param
from .complexity import Bottleneck, SHIFT_FRACTION
from .tensor import Axis


class Conv2d(Module):
    """Per-frame 2d conv with He-uniform weights (ReLU gain)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, pad: int | None = None,
                 bias: bool = True, rng=None, name: str = "conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / (c_in * k * k))
        self.weight = Param(rng.uniform(-bound, bound, (c_out, c_in, k, k)), f"{name}.weight")
        self.bias = Param(np.zeros(c_out), f"{name}.bias") if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x: Node) -> Node:
        return ad.conv2(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng=None, name: str = "fc", scale: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = scale / np.sqrt(c_in)
        self.weight = Param(rng.uniform(-bound, bound, (c_out, c_in)), f"{name}.weight")
        self.bias = Param(np.zeros(c_out), f"{name}.bias")

    def forward(self, x: Node) -> Node:
        return ad.linear(x, self.weight, self.bias, Axis.C)


class BottleneckBlock(Module):
    """Runs a :class:`~aia.complexity.Bottleneck` descriptor on ``N,C,T,H,W`` input."""

    def __init__(self, spec: Bottleneck, rng=None, shift_fraction: float = SHIFT_FRACTION):
        if not isinstance(spec, Bottleneck):
            raise TypeError(f"expected a Bottleneck descriptor, got {type(spec).__name__}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.shift_fraction = shift_fraction
        n, w = spec.name, spec.width
        self.conv1 = Conv2d(spec.c_in, w, 1, bias=False, rng=rng, name=f"{n}.conv1")
        self.bn1 = BatchNorm(w, name=f"{n}.bn1")
        self.conv2 = Conv2d(w, w, 3, spec.stride, bias=False, rng=rng, name=f"{n}.conv2")
        self.bn2 = BatchNorm(w, name=f"{n}.bn2")
        self.conv3 = Conv2d(w, spec.c_out, 1, bias=False, rng=rng, name=f"{n}.conv3")
        self.bn3 = BatchNorm(spec.c_out, name=f"{n}.bn3")
        self.attn = None
        if spec.attention is not None:
            width = w if spec.attention.width == "reduced" else spec.c_out
            self.attn = build_attention(spec.attention, width, rng)
        self.down = None
        if spec.has_downsample:
            self.down = Conv2d(spec.c_in, spec.c_out, 1, spec.stride, bias=False, rng=rng, name=f"{n}.downsample")
            self.down_bn = BatchNorm(spec.c_out, name=f"{n}.downsample.bn")

    def forward(self, x: Node) -> Node:
        h = ad.temporal_shift(x, self.shift_fraction) if self.spec.shift else x
        h = ad.relu(self.bn1(self.conv1(h)))
        h = ad.relu(self.bn2(self.conv2(h)))
        full = self.attn is not None and self.spec.attention.width == "full"
        if self.attn is not None and not full:
            h = self.attn(h)
        h = self.bn3(self.conv3(h))
        if full:
            h = self.attn(h)
        skip = self.down_bn(self.down(x)) if self.down is not None else x
        return ad.relu(ad.add(h, skip))
