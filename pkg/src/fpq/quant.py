"""Uniform integer and scaled minifloat quantizers.

Tensors are handled as 2-D ``[rows, cols]`` views (a vector is one row, higher
ranks fold their leading axes into rows).  Scales live on a 2-D grid:

* ``tensor`` -> ``(1, 1)``
* ``token``  -> ``(rows, 1)``, one per row
* ``group``  -> ``(rows, ceil(cols / group_size))``, groups run along columns;
  the last group may be ragged.

Integer dequantization is ``S * (code - Z)``; minifloat dequantization is
``S * decode(code)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats
from .spec import QuantSpec, SpecError

# Scales keep a 36-bit significand so scale * code is exact for codes of up to
# 17 bits.  That makes quantize(dequantize(q)) reproduce q exactly.
SCALE_SIGNIFICAND_BITS = 36


class QuantizationError(ValueError):
    """Invalid input to a quantizer or a corrupted QuantizedTensor."""


# groups of subnormal-magnitude values would otherwise get a zero scale
MIN_SCALE = np.finfo(np.float64).tiny


def snap_scales(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not np.isfinite(s).all():
        raise QuantizationError("dynamic range too large: a scale overflowed")
    m, e = np.frexp(np.maximum(s, MIN_SCALE))
    m = np.rint(m * 2.0**SCALE_SIGNIFICAND_BITS) / 2.0**SCALE_SIGNIFICAND_BITS
    return np.ldexp(m, e)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray | None
    shape: tuple
    spec: QuantSpec
    raw_scales: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    def scale_index(self) -> np.ndarray:
        """Flat index into ``scales`` for every element (the group map)."""
        rows, cols = _as_2d_shape(self.shape)
        if self.spec.granularity == "tensor":
            return np.zeros(self.shape, dtype=np.intp)
        r = np.arange(rows)[:, None]
        c = _column_groups(cols, self.spec)[None, :]
        return (r * self.scales.shape[1] + c).reshape(self.shape)

    def expanded_scales(self) -> np.ndarray:
        """Per-element scale, in the 2-D view."""
        return _expand(self.scales, self.shape, self.spec)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _as_2d_shape(shape) -> tuple[int, int]:
    if len(shape) == 0:
        raise QuantizationError("cannot quantize a 0-d tensor")
    if len(shape) == 1:
        return 1, int(shape[0])
    return int(np.prod(shape[:-1])), int(shape[-1])


def _column_groups(cols: int, spec: QuantSpec) -> np.ndarray:
    if spec.granularity == "group":
        return np.arange(cols) // spec.group_size
    return np.zeros(cols, dtype=np.intp)


def scale_grid_shape(shape, spec: QuantSpec) -> tuple[int, int]:
    rows, cols = _as_2d_shape(shape)
    if spec.granularity == "tensor":
        return 1, 1
    if spec.granularity == "token":
        return rows, 1
    return rows, -(-cols // spec.group_size)


def _expand(grid: np.ndarray, shape, spec: QuantSpec) -> np.ndarray:
    rows, cols = _as_2d_shape(shape)
    if spec.granularity in ("tensor", "token"):
        return np.broadcast_to(grid, (rows, cols))
    return np.repeat(grid, spec.group_size, axis=1)[:, :cols]


def _group_reduce(x2: np.ndarray, spec: QuantSpec, ufunc) -> np.ndarray:
    """Reduce ``x2`` over each quantization group into the scale grid."""
    if spec.granularity == "tensor":
        return np.asarray(ufunc.reduce(x2, axis=None)).reshape(1, 1)
    if spec.granularity == "token":
        return ufunc.reduce(x2, axis=1, keepdims=True)
    starts = np.arange(0, x2.shape[1], spec.group_size)
    return ufunc.reduceat(x2, starts, axis=1)


def _check_input(tensor, spec: QuantSpec) -> np.ndarray:
    x = np.asarray(tensor, dtype=np.float64)
    if x.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    if not np.isfinite(x).all():
        raise QuantizationError("tensor contains non-finite values")
    if spec.granularity == "token" and x.ndim != 2:
        raise QuantizationError(f"token-wise quantization needs a 2-D matrix, got shape {x.shape}")
    return x


def int_params(x2: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray | None]:
    """Scales (and zero points when asymmetric) for ``x2`` on the scale grid."""
    if spec.symmetric:
        amax = _group_reduce(np.abs(x2), spec, np.maximum)
        s = amax / spec.qmax
        s = np.where(amax > 0, s, 1.0)
        return snap_scales(s), None
    lo = _group_reduce(x2, spec, np.minimum)
    hi = _group_reduce(x2, spec, np.maximum)
    # constant groups: widen the range to include 0 so the scale stays positive
    flat = hi == lo
    lo = np.where(flat, np.minimum(lo, 0.0), lo)
    hi = np.where(flat, np.maximum(hi, 0.0), hi)
    with np.errstate(over="ignore"):  # an overflowed range is rejected by snap_scales
        s = (hi - lo) / (spec.qmax - spec.qmin)
    s = snap_scales(np.where(hi > lo, s, 1.0))
    z = np.rint(-lo / s).astype(np.int64)
    return s, z


def fp_scales(x2: np.ndarray, spec: QuantSpec) -> np.ndarray:
    amax = _group_reduce(np.abs(x2), spec, np.maximum)
    s = amax / formats.max_finite(spec.fmt)
    return snap_scales(np.where(amax > 0, s, 1.0))


def _int_codes(x2, s_full, z_full, spec):
    if z_full is None:
        return np.clip(np.rint(x2 / s_full), spec.qmin, spec.qmax).astype(np.int64)
    return np.clip(np.rint(x2 / s_full) + z_full, spec.qmin, spec.qmax).astype(np.int64)


def encode_with_scales(tensor, spec: QuantSpec, scales: np.ndarray,
                       zero_points: np.ndarray | None = None) -> np.ndarray:
    """Codes for ``tensor`` under fixed scales (and zero points)."""
    x = np.asarray(tensor, dtype=np.float64)
    x2 = x.reshape(_as_2d_shape(x.shape))
    s_full = _expand(scales, x.shape, spec)
    if spec.is_int:
        z_full = None if zero_points is None else _expand(zero_points, x.shape, spec)
        codes = _int_codes(x2, s_full, z_full, spec)
    else:
        codes = formats.encode_nearest(x2 / s_full, spec.fmt).astype(np.int64)
    return codes.reshape(x.shape)


def constrain_scales(scales: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Apply the spec's power-of-two constraint to a scale grid."""
    from . import scalecast

    if spec.scale_constraint == "m1":
        return scalecast.constrain_m1(scales.reshape(-1)).constrained.reshape(scales.shape)
    if spec.scale_constraint == "m2":
        per_block = spec.group_rows * scales.shape[1]
        return scalecast.constrain_m2(scales.reshape(-1), per_block).constrained.reshape(scales.shape)
    return scales


def quantize_int(tensor, spec: QuantSpec) -> QuantizedTensor:
    if not spec.is_int:
        raise SpecError(f"quantize_int needs an integer spec, got {spec}")
    x = _check_input(tensor, spec)
    x2 = x.reshape(_as_2d_shape(x.shape))
    s, z = int_params(x2, spec)
    codes = encode_with_scales(x, spec, s, z)
    return QuantizedTensor(codes, s, z, x.shape, spec)


def quantize_fp(tensor, spec: QuantSpec) -> QuantizedTensor:
    if spec.is_int:
        raise SpecError(f"quantize_fp needs a minifloat spec, got {spec}")
    x = _check_input(tensor, spec)
    x2 = x.reshape(_as_2d_shape(x.shape))
    s = fp_scales(x2, spec)
    raw = None
    if spec.scale_constraint != "none":
        raw, s = s, constrain_scales(s, spec)
    codes = encode_with_scales(x, spec, s)
    return QuantizedTensor(codes, s, None, x.shape, spec, raw_scales=raw)


def quantize(tensor, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest quantization under any spec."""
    return quantize_int(tensor, spec) if spec.is_int else quantize_fp(tensor, spec)


def quantize_activations_tokenwise(acts, spec: QuantSpec) -> QuantizedTensor:
    x = np.asarray(acts)
    if x.ndim != 2:
        raise QuantizationError(f"activations must be a 2-D [tokens, hidden] matrix, got shape {x.shape}")
    if spec.granularity != "token":
        raise SpecError(f"token-wise activation quantization needs token granularity, got {spec}")
    return quantize(x, spec)


def validate(q: QuantizedTensor) -> None:
    """Raise QuantizationError if ``q`` is internally inconsistent."""
    spec = q.spec
    if q.codes.shape != tuple(q.shape):
        raise QuantizationError(f"codes shape {q.codes.shape} does not match {tuple(q.shape)}")
    expected = scale_grid_shape(q.shape, spec)
    if q.scales.shape != expected:
        raise QuantizationError(f"corrupted group map: scale grid {q.scales.shape}, expected {expected}")
    if not (np.isfinite(q.scales).all() and (q.scales > 0).all()):
        raise QuantizationError("scales must be positive and finite")
    if spec.is_int:
        if q.codes.size and (q.codes.min() < spec.qmin or q.codes.max() > spec.qmax):
            raise QuantizationError(f"integer codes outside [{spec.qmin}, {spec.qmax}]")
        if spec.symmetric != (q.zero_points is None):
            raise QuantizationError("zero points must be present exactly when asymmetric")
        if q.zero_points is not None and q.zero_points.shape != expected:
            raise QuantizationError(f"corrupted group map: zero-point grid {q.zero_points.shape}")
    else:
        if q.zero_points is not None:
            raise QuantizationError("minifloat tensors carry no zero points")
        if q.codes.size and (q.codes.min() < 0 or q.codes.max() >= spec.fmt.n_codes):
            raise QuantizationError(f"codes outside the {spec.fmt} code range")


def dequantize(q: QuantizedTensor) -> np.ndarray:
    validate(q)
    rows_cols = _as_2d_shape(q.shape)
    codes2 = q.codes.reshape(rows_cols)
    s_full = q.expanded_scales()
    if q.spec.is_int:
        if q.zero_points is None:
            out = s_full * codes2
        else:
            out = s_full * (codes2 - _expand(q.zero_points, q.shape, q.spec))
    else:
        out = s_full * formats.decode(codes2, q.spec.fmt)
    return out.reshape(q.shape)
