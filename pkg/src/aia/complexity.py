"""Static parameter and FLOP accounting over declarative architecture specs.

FLOPs follow the multiply-accumulate convention: a conv or linear layer
costs one FLOP per MAC over all of its output positions (every frame of the
clip).  Under the default ``mac+bn`` convention each BatchNorm output
element also costs 2 (its folded scale and shift); ``mac`` drops BN.
ReLU, pooling, sigmoid, expand, shifts and elementwise products are free
under both.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from math import prod
from typing import Iterable, Union

from .attention import AttentionConfig
from .tensor import Axis
from .variants import AIA_LABELS, GATE_AXES, LABELS

CONVENTIONS = ("mac+bn", "mac")
DEFAULT_CONVENTION = "mac+bn"
SHIFT_FRACTION = 0.125
REDUCTION = 16

#: (C, T, H, W) of one clip; the batch axis never enters the counts
Shape = tuple[int, int, int, int]


class SpecError(ValueError):
    """An ArchSpec whose layers do not chain."""


@dataclass(frozen=True)
class Conv:
    name: str
    c_in: int
    c_out: int
    kernel: tuple[int, int, int] = (1, 3, 3)  # (kt, kh, kw); kt=1 is a per-frame 2d conv
    stride: int = 1  # spatial stride
    pad: int | None = None  # spatial padding, default kh // 2
    bias: bool = False


@dataclass(frozen=True)
class BN:
    name: str
    channels: int


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool:
    name: str
    kernel: int = 3
    stride: int = 2
    pad: int = 1


@dataclass(frozen=True)
class GlobalAvgPool:
    """Per-frame mean over H and W."""

    name: str


@dataclass(frozen=True)
class Linear:
    name: str
    c_in: int
    c_out: int
    bias: bool = True


@dataclass(frozen=True)
class Consensus:
    """Average of per-frame predictions over T."""

    name: str


@dataclass(frozen=True)
class TemporalShift:
    name: str
    fraction: float = SHIFT_FRACTION


@dataclass(frozen=True)
class Attention:
    name: str
    config: AttentionConfig


@dataclass(frozen=True)
class Bottleneck:
    """1x1 reduce -> 3x3 (strided) -> 1x1 expand, plus skip; optional shift and attention."""

    name: str
    c_in: int
    width: int
    stride: int = 1
    expansion: int = 4
    shift: bool = False
    attention: AttentionConfig | None = None

    @property
    def c_out(self) -> int:
        return self.width * self.expansion

    @property
    def has_downsample(self) -> bool:
        return self.stride != 1 or self.c_in != self.c_out

    def layers(self) -> list:
        """Flattened descriptor list in execution order (downsample last)."""
        n = self.name
        out: list = []
        if self.shift:
            out.append(TemporalShift(f"{n}.shift"))
        out += [Conv(f"{n}.conv1", self.c_in, self.width, (1, 1, 1)), BN(f"{n}.bn1", self.width), ReLU(f"{n}.relu1"),
                Conv(f"{n}.conv2", self.width, self.width, (1, 3, 3), self.stride), BN(f"{n}.bn2", self.width),
                ReLU(f"{n}.relu2")]
        reduced = self.attention is not None and self.attention.width == "reduced"
        if reduced:
            out.append(Attention(f"{n}.attn", self.attention))
        out += [Conv(f"{n}.conv3", self.width, self.c_out, (1, 1, 1)), BN(f"{n}.bn3", self.c_out)]
        if self.attention is not None and not reduced:
            out.append(Attention(f"{n}.attn", self.attention))
        return out

    def downsample(self) -> list:
        if not self.has_downsample:
            return []
        return [Conv(f"{self.name}.downsample.conv", self.c_in, self.c_out, (1, 1, 1), self.stride),
                BN(f"{self.name}.downsample.bn", self.c_out)]


Layer = Union[Conv, BN, ReLU, MaxPool, GlobalAvgPool, Linear, Consensus, TemporalShift, Attention, Bottleneck]
LAYER_TYPES = {cls.__name__: cls for cls in
               (Conv, BN, ReLU, MaxPool, GlobalAvgPool, Linear, Consensus, TemporalShift, Attention, Bottleneck)}


@dataclass(frozen=True)
class ArchSpec:
    name: str
    frames: int
    crop: tuple[int, int]
    in_channels: int
    classes: int
    layers: tuple = ()

    @property
    def input_shape(self) -> Shape:
        return (self.in_channels, self.frames, self.crop[0], self.crop[1])


@dataclass
class Row:
    layer: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    spec: str
    convention: str
    rows: list[Row] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params_m(self) -> str:
        return f"{self.total_params / 1e6:.2f}M"

    @property
    def flops_g(self) -> str:
        return f"{self.total_flops / 1e9:.2f}G"

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "convention": self.convention,
            "rows": [dataclasses.asdict(r) for r in self.rows],
            "totals": {"params": self.total_params, "flops": self.total_flops,
                       "params_rounded": self.params_m, "flops_rounded": self.flops_g},
        }


# ---------------------------------------------------------------------------
# per-layer rules
# ---------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def attention_cost(config: AttentionConfig, shape: Shape, count_bn: bool) -> tuple[int, int]:
    """(params, flops) of one attention insertion on a ``C,T,H,W`` feature."""
    c, t, h, w = shape
    v = config.variant
    use_bn = config.bn_mode != "bypass"
    if v in AIA_LABELS:
        extents = {Axis.C: c, Axis.T: t, Axis.H: h, Axis.W: w}
        volume = c * t * h * w
        params = flops = 0
        for axis in GATE_AXES[v]:
            positions = volume // extents[axis]
            params += 54 + (2 if use_bn else 0)
            flops += 54 * positions + (2 * positions if use_bn and count_bn else 0)
        return params, flops
    hidden = c // REDUCTION
    mlp_params = c * hidden + hidden + hidden * c + c
    if v == "se3d":
        return mlp_params, 2 * c * hidden
    if v == "ge3d_g":
        return 0, 0
    if v == "s3d_g":
        return c * c + c, c * c
    if v in ("cbam3d_177", "cbam3d_377"):
        kt = 1 if v == "cbam3d_177" else 3
        conv = 2 * kt * 49
        bn_p = 2 if use_bn else 0
        bn_f = 2 * t * h * w if use_bn and count_bn else 0
        return mlp_params + conv + bn_p, 2 * (2 * c * hidden) + conv * t * h * w + bn_f
    raise ValueError(f"no cost model for variant {v!r}")


def _layer_cost(layer, shape: Shape, count_bn: bool) -> tuple[int, int, Shape]:
    c, t, h, w = shape
    if isinstance(layer, Conv):
        if layer.c_in != c:
            raise SpecError(f"{layer.name}: expects {layer.c_in} channels, got {c}")
        kt, kh, kw = layer.kernel
        pad = kh // 2 if layer.pad is None else layer.pad
        ho, wo = _conv_out(h, kh, layer.stride, pad), _conv_out(w, kw, layer.stride, pad)
        if ho < 1 or wo < 1:
            raise SpecError(f"{layer.name}: spatial extent collapses to {ho}x{wo}")
        params = kt * kh * kw * layer.c_in * layer.c_out + (layer.c_out if layer.bias else 0)
        flops = kt * kh * kw * layer.c_in * layer.c_out * t * ho * wo
        return params, flops, (layer.c_out, t, ho, wo)
    if isinstance(layer, BN):
        if layer.channels != c:
            raise SpecError(f"{layer.name}: BN over {layer.channels} channels, got {c}")
        return 2 * c, (2 * c * t * h * w if count_bn else 0), shape
    if isinstance(layer, (ReLU, TemporalShift)):
        return 0, 0, shape
    if isinstance(layer, MaxPool):
        ho = _conv_out(h, layer.kernel, layer.stride, layer.pad)
        wo = _conv_out(w, layer.kernel, layer.stride, layer.pad)
        return 0, 0, (c, t, ho, wo)
    if isinstance(layer, GlobalAvgPool):
        return 0, 0, (c, t, 1, 1)
    if isinstance(layer, Linear):
        if layer.c_in != c or h != 1 or w != 1:
            raise SpecError(f"{layer.name}: expects {layer.c_in}x1x1 features, got {c}x{h}x{w}")
        params = layer.c_in * layer.c_out + (layer.c_out if layer.bias else 0)
        return params, layer.c_in * layer.c_out * t, (layer.c_out, t, 1, 1)
    if isinstance(layer, Consensus):
        return 0, 0, (c, 1, h, w)
    if isinstance(layer, Attention):
        p, f = attention_cost(layer.config, shape, count_bn)
        return p, f, shape
    raise SpecError(f"unsupported layer {layer!r}")


def _walk(layers: Iterable, shape: Shape, count_bn: bool, rows: list[Row]) -> Shape:
    for layer in layers:
        if isinstance(layer, Bottleneck):
            if layer.c_in != shape[0]:
                raise SpecError(f"{layer.name}: expects {layer.c_in} channels, got {shape[0]}")
            main = _walk(layer.layers(), shape, count_bn, rows)
            skip = _walk(layer.downsample(), shape, count_bn, rows)
            if main != skip:
                raise SpecError(f"{layer.name}: residual shapes differ {main} vs {skip}")
            rows.append(Row(f"{layer.name}.relu_out", 0, 0))
            shape = main
        else:
            p, f, shape = _layer_cost(layer, shape, count_bn)
            rows.append(Row(layer.name, p, f))
    return shape


def analyze(spec: ArchSpec, convention: str = DEFAULT_CONVENTION) -> ComplexityReport:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}; choose from {CONVENTIONS}")
    report = ComplexityReport(spec.name, convention)
    _walk(spec.layers, spec.input_shape, convention == "mac+bn", report.rows)
    return report


def count_params(spec: ArchSpec) -> ComplexityReport:
    return analyze(spec)


def count_flops(spec: ArchSpec, convention: str = DEFAULT_CONVENTION) -> ComplexityReport:
    return analyze(spec, convention)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

RESNET50_STAGES = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))


def resnet50_spec(mode: str = "TSN", frames: int = 8, crop: int = 224, classes: int = 174,
                  attention: AttentionConfig | str | None = None) -> ArchSpec:
    """TSN- or TSM-style ResNet-50 with attention inside every bottleneck."""
    mode = mode.upper()
    if mode not in ("TSN", "TSM"):
        raise ValueError(f"backbone mode must be TSN or TSM, got {mode!r}")
    if isinstance(attention, str):
        attention = AttentionConfig(attention)
    if attention is not None and attention.variant == "none":
        attention = None
    layers: list = [Conv("conv1", 3, 64, (1, 7, 7), 2, 3), BN("bn1", 64), ReLU("relu"), MaxPool("maxpool")]
    c_in = 64
    for si, (width, blocks, stride) in enumerate(RESNET50_STAGES, start=1):
        for bi in range(blocks):
            layers.append(Bottleneck(f"layer{si}.{bi}", c_in, width, stride if bi == 0 else 1,
                                     shift=mode == "TSM", attention=attention))
            c_in = width * 4
    layers += [GlobalAvgPool("avgpool"), Linear("fc", c_in, classes), Consensus("consensus")]
    label = LABELS[attention.variant] if attention else "None"
    return ArchSpec(f"{mode}-ResNet50+{label}", frames, (crop, crop), 3, classes, tuple(layers))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _layer_to_dict(layer) -> dict:
    out = {"type": type(layer).__name__}
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        if isinstance(v, AttentionConfig):
            v = dataclasses.asdict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise SpecError(f"unknown layer type {kind!r}; known: {', '.join(LAYER_TYPES)}")
    cls = LAYER_TYPES[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - names
    if extra:
        raise SpecError(f"{kind}: unknown fields {sorted(extra)}")
    for key in ("config", "attention"):
        if isinstance(d.get(key), (dict, str)):
            d[key] = AttentionConfig(**d[key]) if isinstance(d[key], dict) else AttentionConfig(d[key])
    if "kernel" in d and isinstance(d["kernel"], list):
        d["kernel"] = tuple(d["kernel"])
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpecError(f"{kind}: {exc}") from None


def spec_to_dict(spec: ArchSpec) -> dict:
    return {"name": spec.name, "frames": spec.frames, "crop": list(spec.crop), "in_channels": spec.in_channels,
            "classes": spec.classes, "layers": [_layer_to_dict(layer) for layer in spec.layers]}


def spec_from_dict(d: dict) -> ArchSpec:
    try:
        crop = d["crop"]
        crop = (crop, crop) if isinstance(crop, int) else tuple(crop)
        return ArchSpec(d["name"], int(d["frames"]), crop, int(d["in_channels"]), int(d["classes"]),
                        tuple(_layer_from_dict(x) for x in d.get("layers", [])))
    except KeyError as exc:
        raise SpecError(f"spec is missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_FORMATS = ("table", "csv", "json")


def emit_report(report: ComplexityReport, fmt: str = "table") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "params", "flops"])
        for r in report.rows:
            writer.writerow([r.layer, r.params, r.flops])
        writer.writerow(["total", report.total_params, report.total_flops])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"
    if fmt == "table":
        width = max([len(r.layer) for r in report.rows] + [len("total")])
        lines = [f"# {report.spec}  (FLOP convention: {report.convention})",
                 f"{'layer':<{width}}  {'params':>12}  {'flops':>15}"]
        for r in report.rows:
            lines.append(f"{r.layer:<{width}}  {r.params:>12}  {r.flops:>15}")
        lines.append(f"{'total':<{width}}  {report.total_params:>12}  {report.total_flops:>15}"
                     f"  ({report.params_m} / {report.flops_g})")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
