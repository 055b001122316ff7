"""Video versions of SE, GE-G, S3D-G and CBAM gating for ablation comparisons."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import Attention
from .autodiff import BatchNorm, Param
from .tensor import Axis

STH = (Axis.T, Axis.H, Axis.W)
REDUCTION = 16


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _expand_sth(y: ad.Node, like: ad.Node) -> ad.Node:
    for a in STH:
        y = ad.expand(y, a, like.value.extent(a))
    return y


class _MLP:
    """Reduce -> ReLU -> restore over the channel axis, with biases."""

    def __init__(self, channels: int, reduction: int, rng, name: str):
        if channels % reduction:
            raise ValueError(f"reduction ratio {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.w1 = Param(_uniform(rng, channels, (hidden, channels)), f"{name}.fc1.weight")
        self.b1 = Param(np.zeros(hidden), f"{name}.fc1.bias")
        self.w2 = Param(_uniform(rng, hidden, (channels, hidden)), f"{name}.fc2.weight")
        self.b2 = Param(np.zeros(channels), f"{name}.fc2.bias")

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, v: ad.Node) -> ad.Node:
        h = ad.relu(ad.linear(v, self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)


class SE3D(Attention):
    def __init__(self, channels: int, rng=None, reduction: int = REDUCTION):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = _MLP(channels, reduction, rng, "se3d")
        self.w1, self.b1, self.w2, self.b2 = self.mlp.params()

    def gate_map(self, x):
        s = ad.avgpool_global(x, STH)
        return _expand_sth(ad.sigmoid(self.mlp(s)), x)


class GE3DG(Attention):
    """Parameter-free: sigmoid of the global spatio-temporal mean."""

    def gate_map(self, x):
        return _expand_sth(ad.sigmoid(ad.avgpool_global(x, STH)), x)


class S3DG(Attention):
    def __init__(self, channels: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(_uniform(rng, channels, (channels, channels)), "s3d_g.weight")
        self.bias = Param(np.zeros(channels), "s3d_g.bias")

    def gate_map(self, x):
        s = ad.avgpool_global(x, STH)
        return _expand_sth(ad.sigmoid(ad.linear(s, self.weight, self.bias)), x)


class CBAM3D(ad.Module):
    """Channel gate from a shared MLP on avg/max pools, then a k_t x 7 x 7 spatial gate."""

    def __init__(self, channels: int, kt: int = 1, rng=None, bn_mode: str = "train",
                 reduction: int = REDUCTION):
        if kt not in (1, 3):
            raise ValueError(f"CBAM3D temporal kernel must be 1 or 3, got {kt}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kt = kt
        self.mlp = _MLP(channels, reduction, rng, f"cbam3d_{kt}77.mlp")
        self.w1, self.b1, self.w2, self.b2 = self.mlp.params()
        shape = (1, 2, kt, 7, 7)
        self.kernel = Param(_uniform(rng, int(np.prod(shape[1:])), shape), f"cbam3d_{kt}77.spatial.kernel")
        self.bn = BatchNorm(1, channel_axis=Axis.C, mode=bn_mode, name=f"cbam3d_{kt}77.spatial.bn")

    def channel_gate(self, x):
        avg = self.mlp(ad.avgpool_global(x, STH))
        mx = x
        for a in STH:
            mx = ad.pool(mx, a, "max")
        return _expand_sth(ad.sigmoid(ad.add(avg, self.mlp(mx))), x)

    def spatial_gate(self, x):
        ctx = ad.concat(ad.pool(x, Axis.C, "avg"), ad.pool(x, Axis.C, "max"), Axis.C)
        y = ad.conv3(ctx, self.kernel, Axis.C, STH)
        y = ad.sigmoid(self.bn(y))
        return ad.expand(y, Axis.C, x.value.extent(Axis.C))

    def forward(self, x):
        xc = ad.mul(self.channel_gate(x), x)
        return ad.mul(self.spatial_gate(xc), xc)


def build(name: str, channels: int, rng=None, bn_mode: str = "train") -> ad.Module:
    if name == "se3d":
        return SE3D(channels, rng)
    if name == "ge3d_g":
        return GE3DG()
    if name == "s3d_g":
        return S3DG(channels, rng)
    if name == "cbam3d_177":
        return CBAM3D(channels, 1, rng, bn_mode)
    if name == "cbam3d_377":
        return CBAM3D(channels, 3, rng, bn_mode)
    raise ValueError(f"unknown baseline {name!r}")

