"""Power-of-two scale constraints for FP4 weights and the FP4 -> E5M2 cast.

M1 rounds every scale up to a power of two.  M2 keeps the largest scale of a
compute group and rounds every other scale down so that its ratio to that
maximum is a power of two.  Either way, moving an FP4 weight onto an FP8 grid
is an exponent shift.

All power-of-two arithmetic goes through ``frexp``/``ldexp``, so results are
exact rather than dependent on ``log2`` rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import formats
from .quant import QuantizedTensor, _as_2d_shape, _expand
from .spec import QuantSpec, SpecError


@dataclass(frozen=True, eq=False)
class ConstrainedScales:
    original: np.ndarray
    constrained: np.ndarray
    method: str
    group_rows: int | None = None
    shared_max: np.ndarray | None = None


def _check_scales(scales) -> np.ndarray:
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty scale sequence")
    if not (np.isfinite(s).all() and (s > 0).all()):
        raise ValueError("scales must be positive and finite")
    return s


def pow2_ceil(x: np.ndarray) -> np.ndarray:
    """Smallest power of two >= x, exactly."""
    m, e = np.frexp(x)
    return np.where(m == 0.5, x, np.ldexp(1.0, e))


def is_power_of_two(x) -> np.ndarray:
    m, _ = np.frexp(np.asarray(x, dtype=np.float64))
    return m == 0.5


def constrain_m1(scales) -> ConstrainedScales:
    s = _check_scales(scales)
    return ConstrainedScales(original=s, constrained=pow2_ceil(s), method="m1")


def _m2_shift(s_max: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Smallest k >= 0 with s_max / 2**k <= s (i.e. k = ceil(log2(s_max / s)))."""
    _, e_max = np.frexp(s_max)
    _, e = np.frexp(s)
    # the ratio of significands lies in (1/2, 2), so k is e_max - e or one more
    k = np.maximum(e_max - e, 0)
    return np.where(np.ldexp(s_max, -k) > s, k + 1, k)


def constrain_m2(scales, group_rows: int) -> ConstrainedScales:
    """M2 over compute groups of ``group_rows`` consecutive scales (last may be ragged)."""
    if group_rows < 1:
        raise ValueError(f"group_rows must be positive, got {group_rows}")
    s = _check_scales(scales)
    starts = np.arange(0, s.size, group_rows)
    s_max = np.maximum.reduceat(s, starts)
    s_max_full = np.repeat(s_max, group_rows)[: s.size]
    k = _m2_shift(s_max_full, s)
    return ConstrainedScales(
        original=s,
        constrained=np.ldexp(s_max_full, -k),
        method="m2",
        group_rows=group_rows,
        shared_max=s_max,
    )


def compute_group_max(q: QuantizedTensor) -> np.ndarray:
    """Per-element shared base S_max for an M2-constrained tensor (2-D view)."""
    grid = q.scales
    per_block = q.spec.group_rows * grid.shape[1]
    flat = grid.reshape(-1)
    starts = np.arange(0, flat.size, per_block)
    s_max = np.repeat(np.maximum.reduceat(flat, starts), per_block)[: flat.size]
    return s_max.reshape(grid.shape)


def cast_group_to_fp8(q: QuantizedTensor, target: formats.MiniFloatFormat = formats.E5M2) -> QuantizedTensor:
    """Re-express FP4 weights with power-of-two scales on an FP8 grid.

    M1: every scale is 2**n, so each weight becomes ``decode(code) * 2**n``
    in the target format with unit scale.  M2: each weight becomes
    ``decode(code) * (S_hat / S_max)`` with ``S_max`` as the shared scale of its
    compute group.  ``meta`` records ``saturations`` (overflow clamped to the
    target's max finite value) and ``inexact`` (any element whose value changed).
    """
    spec = q.spec
    if spec.is_int or spec.bits != 4:
        raise SpecError(f"cast needs an FP4 tensor, got {spec}")
    if spec.scale_constraint not in ("m1", "m2"):
        raise SpecError(f"cast needs M1 or M2 constrained scales, got {spec.scale_constraint!r}")
    if target.total_bits != 8:
        raise SpecError(f"cast target must be an 8-bit format, got {target}")

    rows_cols = _as_2d_shape(q.shape)
    vals = formats.decode(q.codes.reshape(rows_cols), spec.fmt)
    if spec.scale_constraint == "m1":
        if not is_power_of_two(q.scales).all():
            raise SpecError("M1 tensor has a scale that is not a power of two")
        base = np.ones((1, 1))
        out_spec = QuantSpec("fp", 8, "tensor", fmt=target)
        shift = _expand(q.scales, q.shape, spec)
    else:
        base = compute_group_max(q)
        if not is_power_of_two(base / q.scales).all():
            raise SpecError("M2 tensor has a scale ratio that is not a power of two")
        out_spec = replace(spec, bits=8, fmt=target, scale_constraint="none", group_rows=1)
        shift = _expand(q.scales / base, q.shape, spec)

    shifted = vals * shift
    codes = formats.encode_nearest(shifted, target)
    landed = formats.decode(codes, target)
    limit = formats.max_finite(target)
    saturations = int(np.count_nonzero(np.abs(shifted) > limit))
    inexact = int(np.count_nonzero(landed != shifted))
    meta = {
        "method": spec.scale_constraint,
        "source_format": spec.fmt.name,
        "saturations": saturations,
        "inexact": inexact,
    }
    return QuantizedTensor(codes.astype(np.int64).reshape(q.shape), base, None, q.shape, out_spec, meta=meta)
