"""Reverse-mode differentiation over the tensor kernels.

Every op below runs its forward kernel immediately and returns a
:class:`Node` that remembers its parents and a closure mapping the upstream
gradient to one gradient per parent.  :func:`backward` walks the recorded
graph in reverse topological order and accumulates into leaf gradients.

Gradients are plain float64 ndarrays shaped like the node values.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tc
from .tensor import Axis, ShapeError, Tensor

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """One recorded op application (or a leaf)."""

    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value: Tensor, parents: tuple["Node", ...] = (), backward_fn: BackwardFn | None = None,
                 op: str = "leaf", requires_grad: bool | None = None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"


class Param(Node):
    """A trainable leaf; ``grad`` accumulates across backward passes."""

    __slots__ = ("name", "grad", "velocity")

    def __init__(self, value: Tensor | np.ndarray, name: str = "param"):
        if not isinstance(value, Tensor):
            value = Tensor(value, None)
        super().__init__(value, op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros(value.shape)
        self.velocity = np.zeros(value.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def assign(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"{self.name}: cannot assign {arr.shape} to {self.shape}")
        self.value = self.value.with_data(arr)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape)

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.shape})"


def constant(x: Tensor) -> Node:
    return Node(x, requires_grad=False)


def _node(value: Tensor, parents, fn, op) -> Node:
    return Node(value, tuple(parents), fn, op)


def backward(out: Node, grad: np.ndarray | None = None) -> None:
    """Propagate ``grad`` (default: ones for a one-element output) to all leaves."""
    if out.backward_fn is None:
        raise RuntimeError("backward called on a node with no recorded forward op")
    if grad is None:
        if out.value.data.size != 1:
            raise ShapeError(f"implicit gradient only for scalar outputs, got shape {out.shape}")
        grad = np.ones(out.shape)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != out.shape:
        raise ShapeError(f"upstream gradient {grad.shape} does not match output {out.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op}: gradient {pg.shape} for parent of shape {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def pool(x: Node, axis: Axis | str, mode: str = "avg") -> Node:
    i = x.value.axis_index(axis)
    n = x.shape[i]
    out = tc.pool_along(x.value, axis, mode)
    if mode == "avg":
        def fn(g):
            return (np.broadcast_to(g / n, x.shape).copy(),)
    else:
        idx = tc.argmax_along(x.value, axis)

        def fn(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, idx, g, axis=i)
            return (gx,)
    return _node(out, (x,), fn, f"pool_{mode}")


def concat(a: Node, b: Node, axis: Axis | str) -> Node:
    i = a.value.axis_index(axis)
    na = a.shape[i]
    out = tc.concat_along(a.value, b.value, axis)

    def fn(g):
        ga, gb = np.split(g, [na], axis=i)
        return ga.copy(), gb.copy()
    return _node(out, (a, b), fn, "concat")


def expand(y: Node, axis: Axis | str, extent: int) -> Node:
    i = y.value.axis_index(axis)
    out = tc.expand_along(y.value, axis, extent)
    return _node(out, (y,), lambda g: (g.sum(axis=i, keepdims=True),), "expand")


def mul(a: Node, b: Node) -> Node:
    out = tc.elementwise(a.value, b.value, "mul")
    return _node(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def add(a: Node, b: Node) -> Node:
    out = tc.elementwise(a.value, b.value, "add")
    return _node(out, (a, b), lambda g: (g, g), "add")


def scale(x: Node, s: float) -> Node:
    s = float(s)
    return _node(tc.scale(x.value, s), (x,), lambda g: (g * s,), "scale")


def sigmoid(x: Node) -> Node:
    out = tc.map_sigmoid(x.value)
    y = out.data
    return _node(out, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Node) -> Node:
    out = tc.relu(x.value)
    mask = x.data > 0
    return _node(out, (x,), lambda g: (g * mask,), "relu")


def square_sum(x: Node) -> Node:
    """Sum of squares to a one-element node; handy as a test loss."""
    out = Tensor._wrap(np.array([np.sum(x.data ** 2)]), None)
    return _node(out, (x,), lambda g: (2.0 * x.data * g[0],), "square_sum")


def total(x: Node) -> Node:
    out = Tensor._wrap(np.array([x.data.sum()]), None)
    return _node(out, (x,), lambda g: (np.full(x.shape, g[0]),), "sum")


def weighted_sum(x: Node, w: np.ndarray) -> Node:
    """``sum(x * w)`` for a fixed weight array, used by gradient checks."""
    w = np.asarray(w, dtype=np.float64)
    out = Tensor._wrap(np.array([np.sum(x.data * w)]), None)
    return _node(out, (x,), lambda g: (w * g[0],), "weighted_sum")


def avgpool_global(x: Node, axes: Sequence[Axis | str] = (Axis.T, Axis.H, Axis.W)) -> Node:
    idx = tuple(x.value.axis_index(a) for a in axes)
    n = int(np.prod([x.shape[i] for i in idx]))
    out = tc.avgpool_global(x.value, axes)
    return _node(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "avgpool_global")


def temporal_shift(x: Node, fraction: float = 0.125) -> Node:
    c, t = x.value.axis_index(Axis.C), x.value.axis_index(Axis.T)
    fold = tc.shift_fold(x.shape[c], fraction)
    out = tc.temporal_shift(x.value, fraction)
    return _node(out, (x,), lambda g: (tc.temporal_shift_array(g, fold, c, t, inverse=True),), "temporal_shift")


def conv3(x: Node, kernel: Node, channel_axis: Axis | str, sliding_axes: Sequence[Axis | str]) -> Node:
    """Differentiable :func:`aia.tensor.conv3_over`."""
    batch, ch, slide = tc._conv_layout(x.value, channel_axis, sliding_axes)
    w = kernel.data
    tc._check_conv3_kernel(w, x.shape[ch])
    xs = tc.to_conv_layout(x.data, batch, ch, slide)
    out = x.value.with_data(tc.from_conv_layout(tc.conv3_over_array(xs, w), batch, ch, slide))

    def fn(g):
        gs = tc.to_conv_layout(g, batch, ch, slide)
        _, _, a, b, d = xs.shape
        ka, kb, kd = w.shape[2:]
        pa, pb, pd = ka // 2, kb // 2, kd // 2
        xp = np.pad(xs, ((0, 0), (0, 0), (pa, pa), (pb, pb), (pd, pd)))
        if gs.shape[0] * a * b * d <= tc._SMALL_CONV:
            win = tc.sliding_window_view(xp, (ka, kb, kd), axis=(2, 3, 4))
            gw = np.tensordot(gs, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            # same-padded correlation with the flipped, transposed kernel is the adjoint
            gx = tc.conv3_over_array(gs, np.flip(w, (2, 3, 4)).transpose(1, 0, 2, 3, 4))
            return tc.from_conv_layout(gx, batch, ch, slide), gw
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(ka):
            for j in range(kb):
                for k in range(kd):
                    win = (slice(None), slice(None), slice(i, i + a), slice(j, j + b), slice(k, k + d))
                    if w.shape[0] == 1:
                        g0 = gs[:, 0]
                        for c in range(w.shape[1]):
                            sub = (win[0], c) + win[2:]
                            gxp[sub] += w[0, c, i, j, k] * g0
                            gw[0, c, i, j, k] = np.vdot(g0, xp[sub])
                    else:
                        gxp[win] += np.einsum("oc,noabd->ncabd", w[:, :, i, j, k], gs)
                        gw[:, :, i, j, k] = np.einsum("noabd,ncabd->oc", gs, xp[win])
        gx = gxp[:, :, pa:pa + a, pb:pb + b, pd:pd + d]
        return tc.from_conv_layout(gx, batch, ch, slide), gw
    return _node(out, (x, kernel), fn, "conv3")


def conv2(x: Node, weight: Node, bias: Node | None = None, stride: int = 1, pad: int | None = None) -> Node:
    """Per-frame 2d convolution over H and W of an ``N,C,T,H,W`` node."""
    w = weight.data
    c_out, c_in, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    out = tc.conv2_spatial(x.value, w, None if bias is None else bias.data, stride, pad)
    ho, wo = out.shape[3], out.shape[4]

    def fn(g):
        n, _, t, h, wd = x.shape
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        # (N,T,Ho,Wo,Cout) so both products are plain matmuls
        gm = np.transpose(g, (0, 2, 3, 4, 1)).reshape(-1, c_out)
        for i in range(kh):
            for j in range(kw):
                hs = slice(i, i + stride * ho, stride)
                ws = slice(j, j + stride * wo, stride)
                win = np.transpose(xp[:, :, :, hs, ws], (0, 2, 3, 4, 1)).reshape(-1, c_in)
                gw[:, :, i, j] = gm.T @ win
                gx_win = (gm @ w[:, :, i, j]).reshape(n, t, ho, wo, c_in)
                gxp[:, :, :, hs, ws] += np.transpose(gx_win, (0, 4, 1, 2, 3))
        gx = gxp[:, :, :, pad:pad + h, pad:pad + wd]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, fn, "conv2")


def linear(x: Node, weight: Node, bias: Node | None = None, feature_axis: Axis | str = Axis.C) -> Node:
    i = x.value.axis_index(feature_axis)
    w = weight.data
    out = tc.linear(x.value, w, None if bias is None else bias.data, feature_axis)

    def fn(g):
        gm = np.moveaxis(g, i, -1)
        xm = np.moveaxis(x.data, i, -1)
        gx = np.moveaxis(gm @ w, -1, i)
        gw = gm.reshape(-1, w.shape[0]).T @ xm.reshape(-1, w.shape[1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.reshape(-1, w.shape[0]).sum(axis=0))
        return grads
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, fn, "linear")


def cross_entropy(logits: Node, labels: Sequence[int], class_axis: Axis | str = Axis.C) -> Node:
    """Mean softmax cross-entropy; non-class axes other than N must be singleton."""
    i = logits.value.axis_index(class_axis)
    z = np.moveaxis(logits.data, i, -1).reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    if z.shape[0] != labels.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {z.shape[0]}")
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor._wrap(np.array([loss]), None)
    moved_shape = np.moveaxis(logits.data, i, -1).shape

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        gz = (p * (g[0] / n)).reshape(moved_shape)
        return (np.moveaxis(gz, -1, i),)
    return _node(out, (logits,), fn, "cross_entropy")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: parameters and BN modes are discovered by attribute walk."""

    def children(self) -> Iterable["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def own_params(self) -> Iterable[Param]:
        for value in vars(self).values():
            if isinstance(value, Param):
                yield value

    def params(self) -> list[Param]:
        out = list(self.own_params())
        for child in self.children():
            out.extend(child.params())
        return out

    def modules(self) -> Iterable["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def train(self) -> "Module":
        for m in self.modules():
            if isinstance(m, BatchNorm) and m.mode != "bypass":
                m.mode = "train"
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            if isinstance(m, BatchNorm) and m.mode != "bypass":
                m.mode = "eval"
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def __call__(self, x: Node) -> Node:
        return self.forward(x)

    def forward(self, x: Node) -> Node:
        raise NotImplementedError


BN_MODES = ("train", "eval", "bypass")


class BatchNorm(Module):
    """Per-channel batch normalization along ``channel_axis``.

    Statistics span every other axis, so a single-channel conv output is
    normalized over the batch and all remaining axes jointly.
    """

    def __init__(self, channels: int, channel_axis: Axis | str = Axis.C, mode: str = "train",
                 eps: float = 1e-5, momentum: float = 0.1, name: str = "bn"):
        if mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {mode!r}")
        self.channels = channels
        self.channel_axis = Axis(channel_axis)
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels), f"{name}.gamma")
        self.beta = Param(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Node) -> Node:
        if self.mode == "bypass":
            return _node(x.value, (x,), lambda g: (g,), "bn_bypass")
        i = x.value.axis_index(self.channel_axis)
        if x.shape[i] != self.channels:
            raise ShapeError(f"BN over {self.channels} channels got extent {x.shape[i]}")
        red = tuple(k for k in range(x.value.ndim) if k != i)
        bshape = [1] * x.value.ndim
        bshape[i] = self.channels
        gamma = self.gamma.data.reshape(bshape)
        beta = self.beta.data.reshape(bshape)
        xd = x.data

        if self.mode == "eval":
            inv = 1.0 / np.sqrt(self.running_var.reshape(bshape) + self.eps)
            xhat = (xd - self.running_mean.reshape(bshape)) * inv
            out = x.value.with_data(gamma * xhat + beta)

            def fn(g):
                return g * gamma * inv, (g * xhat).sum(axis=red), g.sum(axis=red)
            return _node(out, (x, self.gamma, self.beta), fn, "bn_eval")

        m = xd.size // self.channels
        mean = xd.mean(axis=red, keepdims=True)
        var = xd.var(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xd - mean) * inv
        out = x.value.with_data(gamma * xhat + beta)
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean.reshape(-1)
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased

        def fn(g):
            gsum = g.sum(axis=red, keepdims=True)
            gxhat_sum = (g * xhat).sum(axis=red, keepdims=True)
            gx = gamma * inv * (g - gsum / m - xhat * gxhat_sum / m)
            return gx, gxhat_sum.reshape(-1), gsum.reshape(-1)
        return _node(out, (x, self.gamma, self.beta), fn, "bn_train")


# ---------------------------------------------------------------------------
# oracle and optimizer
# ---------------------------------------------------------------------------

def finite_diff_entries(f: Callable[[Tensor], float], x: Tensor, indices: Sequence[int],
                        step: float = 1e-5) -> np.ndarray:
    """Central-difference partials of ``f`` at the given flat indices of ``x``."""
    base = x.numpy().reshape(-1)
    grad = np.empty(len(indices))
    for out_k, k in enumerate(indices):
        orig = base[k]
        base[k] = orig + step
        fp = float(f(x.with_data(base.reshape(x.shape).copy())))
        base[k] = orig - step
        fm = float(f(x.with_data(base.reshape(x.shape).copy())))
        base[k] = orig
        grad[out_k] = (fp - fm) / (2.0 * step)
    return grad


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central differences of a scalar function, one entry at a time."""
    grad = finite_diff_entries(f, x, range(int(np.prod(x.shape))), step)
    return Tensor._wrap(grad.reshape(x.shape), x.axes)


def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD with L2 decay folded into the velocity; zeroes grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.velocity = momentum * p.velocity + p.grad + weight_decay * p.data
        p.assign(p.data - lr * p.velocity)
        p.zero_grad()
