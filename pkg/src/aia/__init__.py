"""Attention-in-attention gating units for video backbones, on a small numpy autodiff core."""

from .attention import AttentionConfig, attach_to_bottleneck, build_attention, build_context, combine
from .complexity import ArchSpec, analyze, count_flops, count_params, emit_report, resnet50_spec
from .tensor import Axis, AxisError, ShapeError, Tensor
from .variants import VARIANTS, UnknownVariantError, canonical

__all__ = [
    "ArchSpec", "AttentionConfig", "Axis", "AxisError", "ShapeError", "Tensor", "UnknownVariantError",
    "VARIANTS", "analyze", "attach_to_bottleneck", "build_attention", "build_context", "canonical",
    "combine", "count_flops", "count_params", "emit_report", "resnet50_spec",
]
