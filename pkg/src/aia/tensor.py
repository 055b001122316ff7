"""Dense float64 tensors with named video axes and the raw numeric kernels.

Everything here is non-differentiable; :mod:`aia.autodiff` wraps these
kernels with backward rules.  A :class:`Tensor` is an immutable numpy array
plus an optional tuple of axis labels drawn from :class:`Axis`.
"""

from __future__ import annotations

import enum
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AxisError(ValueError):
    """Raised when an axis cannot be resolved on a tensor."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Axis(str, enum.Enum):
    N = "N"
    C = "C"
    T = "T"
    H = "H"
    W = "W"

    def __str__(self) -> str:
        return self.value


VIDEO_AXES = (Axis.N, Axis.C, Axis.T, Axis.H, Axis.W)
# axes that can be squeezed into a context; N is never touched
CONTEXT_AXES = (Axis.C, Axis.T, Axis.H, Axis.W)


def _as_axes(axes: Iterable[Axis | str] | None) -> tuple[Axis, ...] | None:
    if axes is None:
        return None
    return tuple(Axis(a) for a in axes)


class Tensor:
    """Row-major float64 array with optional axis labels.

    ``axes`` defaults to ``N,C,T,H,W`` for 5-d data and to unlabeled
    otherwise.  The underlying buffer is marked read-only.
    """

    __slots__ = ("data", "axes")

    def __init__(self, data, axes: Iterable[Axis | str] | None = "default"):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            raise ShapeError("tensors need at least one axis")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        if axes == "default":
            labels = VIDEO_AXES if arr.ndim == 5 else None
        else:
            labels = _as_axes(axes)
        if labels is not None:
            if len(labels) != arr.ndim:
                raise AxisError(f"{len(labels)} labels for a {arr.ndim}-d tensor")
            if len(set(labels)) != len(labels):
                raise AxisError(f"duplicate axis labels {labels}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "axes", labels)

    @classmethod
    def _wrap(cls, arr: np.ndarray, axes) -> "Tensor":
        # internal constructor that skips the defensive copy
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(t, "data", arr)
        object.__setattr__(t, "axes", axes)
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], axes="default") -> "Tensor":
        return cls(np.zeros(tuple(shape)), axes)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, axes="default") -> "Tensor":
        return cls(np.full(tuple(shape), float(value)), axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """The row-major flat buffer (a read-only view)."""
        return self.data.reshape(-1)

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major strides in elements, not bytes."""
        out = []
        acc = 1
        for extent in reversed(self.shape):
            out.append(acc)
            acc *= extent
        return tuple(reversed(out))

    def flat_index(self, index: Sequence[int]) -> int:
        if len(index) != self.ndim:
            raise ShapeError(f"index {tuple(index)} has wrong rank for {self.shape}")
        for i, extent in zip(index, self.shape):
            if not 0 <= i < extent:
                raise IndexError(f"index {tuple(index)} out of bounds for {self.shape}")
        return sum(i * s for i, s in zip(index, self.strides))

    def __getitem__(self, index) -> float:
        return float(self.flat[self.flat_index(index)])

    def axis_index(self, axis: Axis | str) -> int:
        axis = Axis(axis)
        if self.axes is None or axis not in self.axes:
            raise AxisError(f"tensor with axes {self.axes} has no axis {axis}")
        return self.axes.index(axis)

    def extent(self, axis: Axis | str) -> int:
        return self.shape[self.axis_index(axis)]

    def with_data(self, arr: np.ndarray) -> "Tensor":
        """Same labels, new buffer (shape must keep the same rank)."""
        if arr.ndim != self.ndim:
            raise ShapeError(f"rank change {self.ndim} -> {arr.ndim}")
        return Tensor._wrap(arr, self.axes)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def allclose(self, other: "Tensor", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(self.data, other.data, atol=atol, rtol=rtol)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        labels = "".join(a.value for a in self.axes) if self.axes else "?"
        return f"Tensor(shape={self.shape}, axes={labels})"


def _check_same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")


# ---------------------------------------------------------------------------
# axial kernels
# ---------------------------------------------------------------------------

def pool_along(x: Tensor, axis: Axis | str, mode: str = "avg") -> Tensor:
    """Average or max reduction along one axis, keeping it with extent 1."""
    i = x.axis_index(axis)
    if mode == "avg":
        out = x.data.mean(axis=i, keepdims=True)
    elif mode == "max":
        out = x.data.max(axis=i, keepdims=True)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return x.with_data(out)


def argmax_along(x: Tensor, axis: Axis | str) -> np.ndarray:
    """Index of the maximum along ``axis`` (first index on ties), keepdims."""
    i = x.axis_index(axis)
    return np.expand_dims(np.argmax(x.data, axis=i), i)


def concat_along(a: Tensor, b: Tensor, axis: Axis | str) -> Tensor:
    i = a.axis_index(axis)
    if a.axes != b.axes:
        raise AxisError(f"axis labels differ: {a.axes} vs {b.axes}")
    for k, (ea, eb) in enumerate(zip(a.shape, b.shape)):
        if k != i and ea != eb:
            raise ShapeError(f"cannot concat {a.shape} and {b.shape} along {Axis(axis)}")
    return a.with_data(np.concatenate([a.data, b.data], axis=i))


def expand_along(y: Tensor, axis: Axis | str, extent: int) -> Tensor:
    """Repeat a singleton axis ``extent`` times (element copying)."""
    i = y.axis_index(axis)
    if extent < 1:
        raise ValueError(f"extent must be >= 1, got {extent}")
    if y.shape[i] != 1:
        raise ShapeError(f"axis {Axis(axis)} has extent {y.shape[i]}, expected 1")
    return y.with_data(np.repeat(y.data, extent, axis=i))


def elementwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    _check_same_shape(x, y)
    if op == "mul":
        return x.with_data(x.data * y.data)
    if op == "add":
        return x.with_data(x.data + y.data)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x: Tensor, s: float) -> Tensor:
    return x.with_data(x.data * float(s))


def sigmoid_array(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def map_sigmoid(x: Tensor) -> Tensor:
    return x.with_data(sigmoid_array(x.data))


def relu(x: Tensor) -> Tensor:
    return x.with_data(np.maximum(x.data, 0.0))


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_layout(x: Tensor, channel_axis, sliding_axes) -> tuple[int, int, tuple[int, int, int]]:
    ch = x.axis_index(channel_axis)
    slide = tuple(x.axis_index(a) for a in sliding_axes)
    if len(slide) != 3 or len(set(slide)) != 3:
        raise AxisError(f"need three distinct sliding axes, got {sliding_axes}")
    if ch in slide:
        raise AxisError(f"sliding axis overlaps channel axis {Axis(channel_axis)}")
    rest = [k for k in range(x.ndim) if k != ch and k not in slide]
    if len(rest) != 1:
        raise AxisError("conv3_over expects exactly one untouched (batch) axis")
    return rest[0], ch, slide


def _check_conv3_kernel(kernel: np.ndarray, c_in: int) -> None:
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be C_out x C_in x kd x kh x kw, got {kernel.shape}")
    if kernel.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {c_in}")
    if any(k % 2 == 0 for k in kernel.shape[2:]):
        raise ShapeError(f"kernel spatial extents must be odd, got {kernel.shape[2:]}")


# below this many output positions one tensordot over a window view wins
_SMALL_CONV = 4096


def conv3_over_array(xs: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded, stride-1, bias-free 3d correlation on an ``N,Cin,A,B,D`` array."""
    n, c_in, a, b, d = xs.shape
    c_out, _, ka, kb, kd = kernel.shape
    pa, pb, pd = ka // 2, kb // 2, kd // 2
    xp = np.pad(xs, ((0, 0), (0, 0), (pa, pa), (pb, pb), (pd, pd)))
    if n * a * b * d <= _SMALL_CONV:
        win = sliding_window_view(xp, (ka, kb, kd), axis=(2, 3, 4))
        return np.moveaxis(np.tensordot(win, kernel, axes=([1, 5, 6, 7], [1, 2, 3, 4])), -1, 1)
    out = np.zeros((n, c_out, a, b, d))
    for i in range(ka):
        for j in range(kb):
            for k in range(kd):
                w = kernel[:, :, i, j, k]
                win = xp[:, :, i:i + a, j:j + b, k:k + d]
                if c_out == 1:
                    # gate convs: a few scalar axpys beat einsum by a wide margin
                    for c in range(c_in):
                        out[:, 0] += w[0, c] * win[:, c]
                else:
                    out += np.einsum("oc,ncabd->noabd", w, win)
    return out


def to_conv_layout(x: np.ndarray, batch: int, ch: int, slide: tuple[int, int, int]) -> np.ndarray:
    return np.transpose(x, (batch, ch) + slide)


def from_conv_layout(y: np.ndarray, batch: int, ch: int, slide: tuple[int, int, int]) -> np.ndarray:
    order = (batch, ch) + slide
    return np.transpose(y, np.argsort(order))


def conv3_over(x: Tensor, kernel: Tensor | np.ndarray, channel_axis: Axis | str,
               sliding_axes: Sequence[Axis | str]) -> Tensor:
    """3d convolution treating ``channel_axis`` as input channels.

    The kernel is ``C_out x C_in x k x k x k`` and its trailing dims follow
    ``sliding_axes`` in order.  Zero padding keeps every sliding extent.
    """
    k = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    batch, ch, slide = _conv_layout(x, channel_axis, sliding_axes)
    _check_conv3_kernel(k, x.shape[ch])
    xs = to_conv_layout(x.data, batch, ch, slide)
    return x.with_data(from_conv_layout(conv3_over_array(xs, k), batch, ch, slide))


def _conv2_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2_spatial_array(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                        stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Per-frame 2d correlation of an ``N,C,T,H,W`` array over H and W."""
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2 expects {c_in} channels, got {x.shape[1]}")
    if pad is None:
        pad = kh // 2
    n, _, t, h, w = x.shape
    ho, wo = _conv2_out(h, kh, stride, pad), _conv2_out(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    # gather windows into (N,T,Ho,Wo, C*kh*kw) and hit it with one matmul
    cols = np.empty((n, t, ho, wo, c_in, kh, kw))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[..., i, j] = np.transpose(win, (0, 2, 3, 4, 1))
    out = cols.reshape(n, t, ho, wo, -1) @ weight.reshape(c_out, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(np.transpose(out, (0, 4, 1, 2, 3)))


def conv2_spatial(x: Tensor, weight: Tensor | np.ndarray, bias=None, stride: int = 1,
                  pad: int | None = None) -> Tensor:
    if x.axes != VIDEO_AXES:
        raise AxisError(f"conv2_spatial needs N,C,T,H,W input, got {x.axes}")
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    b = None if bias is None else np.asarray(bias.data if isinstance(bias, Tensor) else bias)
    return Tensor._wrap(conv2_spatial_array(x.data, w, b, stride, pad), VIDEO_AXES)


def linear(x: Tensor, weight: Tensor | np.ndarray, bias=None, feature_axis: Axis | str = Axis.C) -> Tensor:
    """Affine map over ``feature_axis``; ``weight`` is ``out x in``."""
    i = x.axis_index(feature_axis)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    if w.shape[1] != x.shape[i]:
        raise ShapeError(f"linear expects {w.shape[1]} features, got {x.shape[i]}")
    moved = np.moveaxis(x.data, i, -1) @ w.T
    if bias is not None:
        moved = moved + np.asarray(bias.data if isinstance(bias, Tensor) else bias)
    return x.with_data(np.moveaxis(moved, -1, i))


def avgpool_global(x: Tensor, axes: Sequence[Axis | str] = (Axis.T, Axis.H, Axis.W)) -> Tensor:
    """Mean over several axes at once, each kept with extent 1."""
    idx = tuple(x.axis_index(a) for a in axes)
    return x.with_data(x.data.mean(axis=idx, keepdims=True))


def shift_fold(channels: int, fraction: float) -> int:
    if not 0.0 < fraction <= 0.5:
        raise ValueError(f"shift fraction must lie in (0, 0.5], got {fraction}")
    return int(channels * fraction)


def temporal_shift_array(x: np.ndarray, fold: int, c_axis: int = 1, t_axis: int = 2,
                         inverse: bool = False) -> np.ndarray:
    """Shift ``fold`` channels forward in time and the next ``fold`` backward.

    Channels ``[0, fold)`` move t -> t+1, channels ``[fold, 2*fold)`` move
    t -> t-1, vacated frames are zero.  ``inverse`` applies the adjoint.
    """
    out = x.copy()
    if fold == 0:
        return out
    xm = np.moveaxis(x, (c_axis, t_axis), (0, 1))
    om = np.moveaxis(out, (c_axis, t_axis), (0, 1))
    fwd, bwd = slice(0, fold), slice(fold, 2 * fold)
    if inverse:
        fwd, bwd = bwd, fwd
    om[fwd] = 0.0
    om[fwd, 1:] = xm[fwd, :-1]
    om[bwd] = 0.0
    om[bwd, :-1] = xm[bwd, 1:]
    return out


def temporal_shift(x: Tensor, fraction: float = 0.125) -> Tensor:
    c, t = x.axis_index(Axis.C), x.axis_index(Axis.T)
    fold = shift_fold(x.shape[c], fraction)
    return x.with_data(temporal_shift_array(x.data, fold, c, t))


# ---------------------------------------------------------------------------
# fixture serialization
# ---------------------------------------------------------------------------
# layout: <u8 axis count> then <u8 extent> per axis, then little-endian f8 data

def dumps(x: Tensor) -> bytes:
    header = struct.pack(f"<Q{x.ndim}Q", x.ndim, *x.shape)
    return header + x.data.astype("<f8").tobytes(order="C")


def loads(buf: bytes, axes="default") -> Tensor:
    (ndim,) = struct.unpack_from("<Q", buf, 0)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    offset = 8 * (1 + ndim)
    count = int(np.prod(shape))
    if len(buf) - offset != 8 * count:
        raise ShapeError(f"payload holds {(len(buf) - offset) // 8} values, header says {count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(data, axes)


def save(x: Tensor, fh: BinaryIO) -> None:
    fh.write(dumps(x))


def load(fh: BinaryIO, axes="default") -> Tensor:
    return loads(fh.read(), axes)
