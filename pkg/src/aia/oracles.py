"""Naive nested-loop reference kernels.

These deliberately avoid numpy vectorisation: they walk flat row-major
buffers with explicit index arithmetic so they share no code path with
:mod:`aia.tensor`.  They are slow and meant for small test shapes.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .tensor import Axis, Tensor


def _strides(shape: Sequence[int]) -> list[int]:
    out = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        out[k] = out[k + 1] * shape[k + 1]
    return out


def _flat(index, strides) -> int:
    return sum(i * s for i, s in zip(index, strides))


def _out(values: list[float], shape, axes) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64).reshape(shape), axes)


def pool(x: Tensor, axis: Axis, mode: str) -> Tensor:
    k = x.axes.index(Axis(axis))
    shape = list(x.shape)
    n = shape[k]
    out_shape = shape[:k] + [1] + shape[k + 1:]
    st = _strides(shape)
    buf = x.flat.tolist()
    res = []
    for idx in itertools.product(*[range(e) for e in out_shape]):
        col = []
        for j in range(n):
            full = list(idx)
            full[k] = j
            col.append(buf[_flat(full, st)])
        if mode == "avg":
            acc = 0.0
            for v in col:
                acc += v
            res.append(acc / n)
        else:
            best = col[0]
            for v in col[1:]:
                if v > best:
                    best = v
            res.append(best)
    return _out(res, out_shape, x.axes)


def concat(a: Tensor, b: Tensor, axis: Axis) -> Tensor:
    k = a.axes.index(Axis(axis))
    na = a.shape[k]
    out_shape = list(a.shape)
    out_shape[k] += b.shape[k]
    sa, sb = _strides(a.shape), _strides(b.shape)
    fa, fb = a.flat.tolist(), b.flat.tolist()
    res = []
    for idx in itertools.product(*[range(e) for e in out_shape]):
        if idx[k] < na:
            res.append(fa[_flat(idx, sa)])
        else:
            j = list(idx)
            j[k] -= na
            res.append(fb[_flat(j, sb)])
    return _out(res, out_shape, a.axes)


def expand(y: Tensor, axis: Axis, extent: int) -> Tensor:
    k = y.axes.index(Axis(axis))
    out_shape = list(y.shape)
    out_shape[k] = extent
    sy = _strides(y.shape)
    fy = y.flat.tolist()
    res = []
    for idx in itertools.product(*[range(e) for e in out_shape]):
        j = list(idx)
        j[k] = 0
        res.append(fy[_flat(j, sy)])
    return _out(res, out_shape, y.axes)


def elementwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    fx, fy = x.flat.tolist(), y.flat.tolist()
    res = [a * b if op == "mul" else a + b for a, b in zip(fx, fy)]
    return _out(res, x.shape, x.axes)


def sigmoid(x: Tensor) -> Tensor:
    return _out([1.0 / (1.0 + math.exp(-v)) for v in x.flat.tolist()], x.shape, x.axes)


def conv3(x: Tensor, kernel: np.ndarray, channel_axis: Axis, sliding: Sequence[Axis]) -> Tensor:
    """Direct sum over input channels and the zero-padded kernel neighbourhood."""
    kernel = np.asarray(kernel)
    ch = x.axes.index(Axis(channel_axis))
    sl = [x.axes.index(Axis(a)) for a in sliding]
    c_out, c_in, ka, kb, kd = kernel.shape
    shape = list(x.shape)
    out_shape = list(shape)
    out_shape[ch] = c_out
    sx = _strides(shape)
    fx = x.flat.tolist()
    kw = kernel.tolist()
    res = []
    for idx in itertools.product(*[range(e) for e in out_shape]):
        o = idx[ch]
        acc = 0.0
        for c in range(c_in):
            for i in range(ka):
                for j in range(kb):
                    for m in range(kd):
                        src = list(idx)
                        src[ch] = c
                        src[sl[0]] = idx[sl[0]] + i - ka // 2
                        src[sl[1]] = idx[sl[1]] + j - kb // 2
                        src[sl[2]] = idx[sl[2]] + m - kd // 2
                        if not all(0 <= src[a] < shape[a] for a in sl):
                            continue
                        acc += kw[o][c][i][j][m] * fx[_flat(src, sx)]
        res.append(acc)
    return _out(res, out_shape, x.axes)


def conv2(x: Tensor, weight: np.ndarray, bias=None, stride: int = 1, pad: int | None = None) -> Tensor:
    weight = np.asarray(weight)
    c_out, c_in, kh, kw = weight.shape
    pad = kh // 2 if pad is None else pad
    n, _, t, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    sx = _strides(x.shape)
    fx = x.flat.tolist()
    wl = weight.tolist()
    bl = [0.0] * c_out if bias is None else list(np.asarray(bias, dtype=float))
    res = []
    for b, o, tt, i, j in itertools.product(range(n), range(c_out), range(t), range(ho), range(wo)):
        acc = bl[o]
        for c in range(c_in):
            for p in range(kh):
                for q in range(kw):
                    hi, wi = i * stride + p - pad, j * stride + q - pad
                    if 0 <= hi < h and 0 <= wi < w:
                        acc += wl[o][c][p][q] * fx[_flat((b, c, tt, hi, wi), sx)]
        res.append(acc)
    return _out(res, (n, c_out, t, ho, wo), x.axes)


def temporal_shift(x: Tensor, fraction: float) -> Tensor:
    ci, ti = x.axes.index(Axis.C), x.axes.index(Axis.T)
    c, t = x.shape[ci], x.shape[ti]
    fold = int(c * fraction)
    sx = _strides(x.shape)
    fx = x.flat.tolist()
    res = []
    for idx in itertools.product(*[range(e) for e in x.shape]):
        ch, tt = idx[ci], idx[ti]
        if ch < fold:
            src_t = tt - 1  # moved forward: frame t holds old t-1
        elif ch < 2 * fold:
            src_t = tt + 1
        else:
            src_t = tt
        if 0 <= src_t < t:
            j = list(idx)
            j[ti] = src_t
            res.append(fx[_flat(j, sx)])
        else:
            res.append(0.0)
    return _out(res, x.shape, x.axes)


# ---------------------------------------------------------------------------
# straight-line attention formulas (numpy allowed; independent of the autodiff path)
# ---------------------------------------------------------------------------

_AXIS_POS = {Axis.C: 1, Axis.T: 2, Axis.H: 3, Axis.W: 4}
_SLIDE = {Axis.C: (Axis.T, Axis.H, Axis.W), Axis.T: (Axis.C, Axis.H, Axis.W),
          Axis.H: (Axis.C, Axis.T, Axis.W), Axis.W: (Axis.C, Axis.T, Axis.H)}


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def _bn_train(v, gamma, beta, eps=1e-5):
    return gamma * (v - v.mean()) / np.sqrt(v.var() + eps) + beta


def gate(x: np.ndarray, axis: Axis, kernel: np.ndarray, bn=None) -> np.ndarray:
    """Y = Expand(Sigmoid(BN(conv(Concat(avg, max))))) for one squeezed axis.

    ``bn`` is ``None`` (bypass) or ``(gamma, beta)`` for train-mode statistics.
    The conv is evaluated by explicit neighbourhood sums over a padded copy.
    """
    k = _AXIS_POS[Axis(axis)]
    g = np.concatenate([x.mean(axis=k, keepdims=True), x.max(axis=k, keepdims=True)], axis=k)
    # move squeezed axis to 1 and the sliding axes after it, in canonical order
    order = [0, k] + [_AXIS_POS[a] for a in _SLIDE[Axis(axis)]]
    gs = np.transpose(g, order)
    n, _, a, b, d = gs.shape
    gp = np.zeros((n, 2, a + 2, b + 2, d + 2))
    gp[:, :, 1:-1, 1:-1, 1:-1] = gs
    conv = np.zeros((n, a, b, d))
    for c in range(2):
        for i in range(3):
            for j in range(3):
                for m in range(3):
                    conv += kernel[0, c, i, j, m] * gp[:, c, i:i + a, j:j + b, m:m + d]
    if bn is not None:
        conv = _bn_train(conv, *bn)
    y = _sig(conv)[:, None]
    y = np.transpose(y, np.argsort(order))
    return np.repeat(y, x.shape[k], axis=k)


def c_unit(x, kc, bn=None):
    return gate(x, Axis.C, kc, bn) * x


def st_gate(x, kt, kh, kw, bns=(None, None, None)):
    return (gate(x, Axis.T, kt, bns[0]) + gate(x, Axis.H, kh, bns[1]) + gate(x, Axis.W, kw, bns[2])) / 3.0


def st_unit(x, kt, kh, kw, bns=(None, None, None)):
    return st_gate(x, kt, kh, kw, bns) * x


def cinst(x, kc, kt, kh, kw, bn_c=None, bns_st=(None, None, None)):
    zc = gate(x, Axis.C, kc, bn_c) * x
    return st_gate(zc, kt, kh, kw, bns_st) * x


def stinc(x, kt, kh, kw, kc, bns_st=(None, None, None), bn_c=None):
    zst = st_gate(x, kt, kh, kw, bns_st) * x
    return gate(zst, Axis.C, kc, bn_c) * x

def _mlp(v, w1, b1, w2, b2):
    return np.maximum(v @ w1.T + b1, 0.0) @ w2.T + b2


def _gate_sth(x, g):
    # g: N x C -> broadcast over T, H, W
    return g[:, :, None, None, None] * x


def se3d(x, w1, b1, w2, b2):
    return _gate_sth(x, _sig(_mlp(x.mean(axis=(2, 3, 4)), w1, b1, w2, b2)))


def ge3d_g(x):
    return _gate_sth(x, _sig(x.mean(axis=(2, 3, 4))))


def s3d_g(x, w, b):
    return _gate_sth(x, _sig(x.mean(axis=(2, 3, 4)) @ w.T + b))


def cbam3d(x, w1, b1, w2, b2, kernel, bn=None):
    """Channel gate from avg+max MLP, then spatial gate by a direct k_t x 7 x 7 sum."""
    avg = _mlp(x.mean(axis=(2, 3, 4)), w1, b1, w2, b2)
    mx = _mlp(x.max(axis=(2, 3, 4)), w1, b1, w2, b2)
    xc = _gate_sth(x, _sig(avg + mx))
    ctx = np.stack([xc.mean(axis=1), xc.max(axis=1)], axis=1)  # N x 2 x T x H x W
    _, _, kt, kh, kw = kernel.shape
    n, _, t, h, w = ctx.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    cp = np.zeros((n, 2, t + 2 * pt, h + 2 * ph, w + 2 * pw))
    cp[:, :, pt:pt + t, ph:ph + h, pw:pw + w] = ctx
    s = np.zeros((n, t, h, w))
    for c in range(2):
        for i in range(kt):
            for j in range(kh):
                for m in range(kw):
                    s += kernel[0, c, i, j, m] * cp[:, c, i:i + t, j:j + h, m:m + w]
    if bn is not None:
        s = _bn_train(s, *bn)
    return _sig(s)[:, None] * xc
