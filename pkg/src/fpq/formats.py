"""Software codec for small ExMy minifloat formats.

A code is an unsigned integer of ``total_bits`` bits laid out as
``sign | exponent | mantissa``.  Exponent field 0 encodes subnormals
(or zero when subnormals are disabled); there is no infinity, and NaN
exists only under the ``reserve-max-code`` policy, where the all-ones
magnitude pattern is taken out of the finite set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _backend

NAN_POLICIES = ("none", "reserve-max-code")


@dataclass(frozen=True)
class MiniFloatFormat:
    exp_bits: int
    mant_bits: int
    bias: int | None = None
    nan_policy: str = "none"
    subnormals: bool = True
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.exp_bits < 1:
            raise ValueError(f"exp_bits must be >= 1, got {self.exp_bits}")
        if self.mant_bits < 0:
            raise ValueError(f"mant_bits must be >= 0, got {self.mant_bits}")
        if self.total_bits > 8:
            raise ValueError(f"formats wider than 8 bits are not supported ({self.total_bits})")
        if self.nan_policy not in NAN_POLICIES:
            raise ValueError(f"nan_policy must be one of {NAN_POLICIES}, got {self.nan_policy!r}")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exp_bits - 1) - 1)
        if not self.name:
            object.__setattr__(self, "name", f"e{self.exp_bits}m{self.mant_bits}")

    @property
    def total_bits(self) -> int:
        return 1 + self.exp_bits + self.mant_bits

    @property
    def n_codes(self) -> int:
        return 1 << self.total_bits

    @property
    def sign_mask(self) -> int:
        return 1 << (self.total_bits - 1)

    def __str__(self) -> str:
        return self.name


E5M2 = MiniFloatFormat(5, 2, name="e5m2")
E4M3 = MiniFloatFormat(4, 3, name="e4m3")
E3M0 = MiniFloatFormat(3, 0, name="e3m0")
E2M1 = MiniFloatFormat(2, 1, name="e2m1")

PRESETS = {f.name: f for f in (E5M2, E4M3, E3M0, E2M1)}

_FORMAT_RE = re.compile(r"^e(\d+)m(\d+)$")


def get_format(name: str | MiniFloatFormat) -> MiniFloatFormat:
    """Resolve a preset name (``"e4m3"``) or a generic ``eXmY`` string."""
    if isinstance(name, MiniFloatFormat):
        return name
    key = name.strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    m = _FORMAT_RE.match(key)
    if m is None:
        raise ValueError(f"unknown minifloat format {name!r}")
    return MiniFloatFormat(int(m.group(1)), int(m.group(2)))


def _decode_magnitude(mcode: int, fmt: MiniFloatFormat) -> float:
    e = mcode >> fmt.mant_bits
    m = mcode & ((1 << fmt.mant_bits) - 1)
    frac = m / (1 << fmt.mant_bits)
    if e == 0:
        if not fmt.subnormals:
            return 0.0
        return frac * 2.0 ** (1 - fmt.bias)
    return (1.0 + frac) * 2.0 ** (e - fmt.bias)


@lru_cache(maxsize=None)
def _tables(fmt: MiniFloatFormat):
    """Return (decode table over all codes, sorted finite magnitudes, their magnitude codes)."""
    n_mag = 1 << (fmt.exp_bits + fmt.mant_bits)
    mags = np.array([_decode_magnitude(c, fmt) for c in range(n_mag)], dtype=np.float64)
    finite = np.ones(n_mag, dtype=bool)
    if fmt.nan_policy == "reserve-max-code":
        finite[-1] = False

    table = np.empty(fmt.n_codes, dtype=np.float64)
    table[:n_mag] = np.where(finite, mags, np.nan)
    table[n_mag:] = -table[:n_mag]

    # magnitudes are nondecreasing in the code; keep the lowest code of each distinct value
    codes = np.flatnonzero(finite)
    vals = mags[codes]
    keep = np.ones(len(vals), dtype=bool)
    keep[1:] = vals[1:] != vals[:-1]
    sorted_mags = np.ascontiguousarray(vals[keep])
    sorted_codes = np.ascontiguousarray(codes[keep].astype(np.uint8))
    for arr in (table, sorted_mags, sorted_codes):
        arr.setflags(write=False)
    return table, sorted_mags, sorted_codes


def decode_table(fmt: MiniFloatFormat) -> np.ndarray:
    """Value of every code, indexed by code.  NaN marks a reserved code."""
    return _tables(fmt)[0]


def magnitude_table(fmt: MiniFloatFormat) -> tuple[np.ndarray, np.ndarray]:
    """Distinct finite magnitudes (ascending) and the magnitude code of each."""
    _, mags, codes = _tables(fmt)
    return mags, codes


def enumerate_values(fmt: MiniFloatFormat) -> np.ndarray:
    """All distinct finite values of ``fmt`` in ascending order (one zero)."""
    if fmt.exp_bits < 1:
        raise ValueError("exp_bits must be >= 1")
    mags = magnitude_table(fmt)[0]
    return np.concatenate([-mags[:0:-1], mags])


def max_finite(fmt: MiniFloatFormat) -> float:
    return float(magnitude_table(fmt)[0][-1])


def decode(codes, fmt: MiniFloatFormat):
    """Decode code(s) to float64.  Accepts a scalar or an integer array."""
    arr = np.asarray(codes)
    if arr.size and (arr.min() < 0 or arr.max() >= fmt.n_codes):
        raise ValueError(f"code out of range for {fmt} ({fmt.total_bits} bits)")
    out = decode_table(fmt)[arr.astype(np.intp)]
    return float(out) if np.ndim(codes) == 0 else out


def encode_nearest(x, fmt: MiniFloatFormat):
    """Round real(s) to the nearest representable value of ``fmt``.

    Ties go to the even code; magnitudes past the largest finite value
    saturate to it.  Returns ``uint8`` code(s).
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("cannot encode NaN")
    mags, mcodes = magnitude_table(fmt)
    flat = np.ascontiguousarray(arr.reshape(-1))
    out = np.empty(flat.shape, dtype=np.uint8)
    _backend.kernels.encode_nearest(flat, mags, mcodes, fmt.sign_mask, out)
    if arr.ndim == 0:
        return int(out[0])
    return out.reshape(arr.shape)


def round_to_format(x, fmt: MiniFloatFormat) -> np.ndarray:
    """decode(encode_nearest(x)); convenience for fake-quantization."""
    return decode(encode_nearest(x, fmt), fmt)
