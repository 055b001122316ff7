"""Names of every attention variant and the gate convolutions each one owns."""

from __future__ import annotations

from .tensor import Axis

C, T, H, W = Axis.C, Axis.T, Axis.H, Axis.W

# canonical shell-safe name -> table label
AIA_LABELS = {
    "c": "C",
    "st": "ST",
    "c_st_seq": "C→ST",
    "st_c_seq": "ST→C",
    "c_st_par": "C+ST",
    "cinst": "CinST",
    "stinc": "STinC",
    "cinst_stinc_seq": "CinST→STinC",
    "stinc_cinst_seq": "STinC→CinST",
    "cinst_stinc_par": "CinST+STinC",
}
BASELINE_LABELS = {
    "se3d": "SE3D",
    "ge3d_g": "GE3D-G",
    "s3d_g": "S3D-G",
    "cbam3d_177": "CBAM3D_177",
    "cbam3d_377": "CBAM3D_377",
}
LABELS = {"none": "None", **AIA_LABELS, **BASELINE_LABELS}
VARIANTS = tuple(LABELS)

_C_UNIT = (C,)
_ST_UNIT = (T, H, W)
# squeezed axis of every 54-weight gate conv, in execution order
GATE_AXES: dict[str, tuple[Axis, ...]] = {
    "c": _C_UNIT,
    "st": _ST_UNIT,
    "c_st_seq": _C_UNIT + _ST_UNIT,
    "st_c_seq": _ST_UNIT + _C_UNIT,
    "c_st_par": _C_UNIT + _ST_UNIT,
    "cinst": _C_UNIT + _ST_UNIT,
    "stinc": _ST_UNIT + _C_UNIT,
    "cinst_stinc_seq": 2 * (_C_UNIT + _ST_UNIT),
    "stinc_cinst_seq": 2 * (_ST_UNIT + _C_UNIT),
    "cinst_stinc_par": 2 * (_C_UNIT + _ST_UNIT),
}


class UnknownVariantError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown attention variant {name!r}; valid names: {', '.join(VARIANTS)}")
        self.name = name


def _key(s: str) -> str:
    return s.strip().lower().replace("→", "->").replace(" ", "")


_ALIASES = {}
for _name, _label in LABELS.items():
    _ALIASES[_key(_name)] = _name
    _ALIASES[_key(_label)] = _name
_ALIASES["cbam3d177"] = "cbam3d_177"
_ALIASES["cbam3d377"] = "cbam3d_377"


def canonical(name: str | None) -> str:
    """Resolve a shell name or table label (``C→ST``, ``C->ST``) to the shell name."""
    if name is None:
        return "none"
    try:
        return _ALIASES[_key(name)]
    except KeyError:
        raise UnknownVariantError(name) from None


def is_baseline(name: str) -> bool:
    return canonical(name) in BASELINE_LABELS
