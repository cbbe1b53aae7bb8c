"""Self-describing little-endian tensor container (.bin / .qt / .lorc).

Layout, all integers little-endian::

    magic      8 bytes  b"FPQTENS\\0"
    version    u16      currently 1
    dtype      u8       0 real64, 1 real32, 2 unsigned codes, 3 signed codes
    bits       u8       code width (0 for reals)
    ndim       u8
    dims       u64 * ndim
    meta_len   u32      length of the UTF-8 JSON block (0 for plain tensors)
    meta       meta_len bytes
    payload    row-major data; codes of <= 4 bits pack two per byte,
               low nibble first, last nibble zero-padded
    crc32      u32 over every preceding byte

See docs/FORMAT.md for the JSON schemas of quantized and LoRC files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .formats import MiniFloatFormat
from .lorc import LorcFactors
from .quant import QuantizedTensor, QuantizationError, validate
from .spec import SpecError, parse_spec

MAGIC = b"FPQTENS\x00"
VERSION = 1
REAL64, REAL32, UCODES, SCODES = 0, 1, 2, 3
MAX_ELEMENTS = 1 << 40

_FIXED = struct.Struct("<8sHBBB")


class FormatError(ValueError):
    """A tensor file is malformed, corrupted, or of an unsupported version."""


def _code_bytes(bits: int) -> int:
    return 1 if bits <= 8 else 2


def payload_size(dtype: int, bits: int, n: int) -> int:
    if dtype == REAL64:
        return 8 * n
    if dtype == REAL32:
        return 4 * n
    if bits <= 4:
        return (n + 1) // 2
    return _code_bytes(bits) * n


def pack_nibbles(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint8).reshape(-1) & 0x0F
    if v.size % 2:
        v = np.append(v, np.uint8(0))
    return (v[0::2] | (v[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:n]


def _encode_payload(arr: np.ndarray, dtype: int, bits: int) -> bytes:
    if dtype == REAL64:
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if dtype == REAL32:
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    codes = np.asarray(arr, dtype=np.int64).reshape(-1)
    lo = -(1 << (bits - 1)) if dtype == SCODES else 0
    hi = (1 << (bits - 1)) - 1 if dtype == SCODES else (1 << bits) - 1
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise FormatError(f"codes do not fit in {bits} {'signed' if dtype == SCODES else 'unsigned'} bits")
    raw = codes & ((1 << bits) - 1)
    if bits <= 4:
        return pack_nibbles(raw)
    return raw.astype("<u1" if bits <= 8 else "<u2").tobytes()


def _decode_payload(data: bytes, dtype: int, bits: int, n: int) -> np.ndarray:
    if dtype == REAL64:
        return np.frombuffer(data, dtype="<f8").astype(np.float64)
    if dtype == REAL32:
        return np.frombuffer(data, dtype="<f4").astype(np.float32)
    if bits <= 4:
        raw = unpack_nibbles(data, n).astype(np.int64)
    else:
        raw = np.frombuffer(data, dtype="<u1" if bits <= 8 else "<u2").astype(np.int64)
    if dtype == SCODES:
        raw = np.where(raw >= (1 << (bits - 1)), raw - (1 << bits), raw)
    return raw


def _dumps(arr: np.ndarray, dtype: int, bits: int = 0, meta: dict | None = None) -> bytes:
    if dtype in (UCODES, SCODES) and not 1 <= bits <= 16:
        raise FormatError(f"code width must be 1..16 bits, got {bits}")
    shape = arr.shape
    if len(shape) > 255:
        raise FormatError("too many dimensions")
    meta_bytes = b"" if meta is None else json.dumps(meta, sort_keys=True).encode("utf-8")
    head = _FIXED.pack(MAGIC, VERSION, dtype, bits, len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape)
    head += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body = head + _encode_payload(arr, dtype, bits)
    return body + struct.pack("<I", zlib.crc32(body))


def _loads(blob: bytes):
    """Parse a container; returns (array, dtype, bits, meta)."""
    if len(blob) < _FIXED.size + 8:
        raise FormatError("file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (corrupted or truncated file)")
    magic, version, dtype, bits, ndim = _FIXED.unpack_from(body, 0)
    if magic != MAGIC:
        raise FormatError("bad magic; not an fpq tensor file")
    if version != VERSION:
        raise FormatError(f"unsupported file version {version} (this reader handles {VERSION})")
    if dtype not in (REAL64, REAL32, UCODES, SCODES):
        raise FormatError(f"unknown dtype tag {dtype}")
    off = _FIXED.size
    dims = struct.unpack_from(f"<{ndim}Q", body, off)
    off += 8 * ndim
    n = 1
    for d in dims:
        n *= d
        if n > MAX_ELEMENTS:
            raise FormatError("dimension overflow")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = None
    if meta_len:
        try:
            meta = json.loads(body[off:off + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable metadata block: {exc}") from None
        off += meta_len
    payload = body[off:]
    if len(payload) != payload_size(dtype, bits, n):
        raise FormatError(f"payload is {len(payload)} bytes, dims {dims} need {payload_size(dtype, bits, n)}")
    arr = _decode_payload(payload, dtype, bits, n).reshape(dims)
    return arr, dtype, bits, meta


def _write(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def dumps_tensor(tensor) -> bytes:
    arr = np.asarray(tensor)
    if arr.dtype == np.float32:
        return _dumps(arr, REAL32)
    return _dumps(np.asarray(arr, dtype=np.float64), REAL64)


def loads_tensor(blob: bytes) -> np.ndarray:
    arr, dtype, _, meta = _loads(blob)
    if dtype not in (REAL64, REAL32) or meta is not None:
        raise FormatError("not a plain real tensor file")
    return arr


def write_tensor(path, tensor) -> None:
    """Write a real tensor (float64, or float32 kept as float32)."""
    _write(path, dumps_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return loads_tensor(_read(path))


# -- quantized tensors ------------------------------------------------------

def _spec_meta(spec) -> dict:
    d = {"spec": str(spec)}
    if spec.fmt is not None:
        f = spec.fmt
        d["format"] = {"exp_bits": f.exp_bits, "mant_bits": f.mant_bits, "bias": f.bias,
                       "nan_policy": f.nan_policy, "subnormals": f.subnormals}
    return d


def _spec_from_meta(meta: dict):
    try:
        spec = parse_spec(meta["spec"])
    except (KeyError, SpecError) as exc:
        raise FormatError(f"bad spec in header: {exc}") from None
    fdesc = meta.get("format")
    if spec.fmt is not None and fdesc is not None:
        fmt = MiniFloatFormat(fdesc["exp_bits"], fdesc["mant_bits"], fdesc["bias"],
                              fdesc["nan_policy"], fdesc["subnormals"])
        if fmt != spec.fmt:
            spec = replace(spec, fmt=fmt)
    return spec


def dumps_quantized(q: QuantizedTensor, lorc_ref: str | None = None) -> bytes:
    validate(q)
    spec = q.spec
    meta = _spec_meta(spec)
    meta.update({
        "kind": "quantized",
        "shape": list(q.shape),
        "scale_grid": list(q.scales.shape),
        "scales": q.scales.reshape(-1).tolist(),
        "zero_points": None if q.zero_points is None else q.zero_points.reshape(-1).tolist(),
        "raw_scales": None if q.raw_scales is None else q.raw_scales.reshape(-1).tolist(),
        "scale_constraint": spec.scale_constraint,
        "group_rows": spec.group_rows,
        "lorc": lorc_ref,
        "meta": q.meta,
    })
    signed = spec.is_int and spec.symmetric
    return _dumps(np.asarray(q.codes), SCODES if signed else UCODES, spec.bits, meta)


def loads_quantized(blob: bytes) -> QuantizedTensor:
    codes, dtype, bits, meta = _loads(blob)
    if meta is None or meta.get("kind") != "quantized":
        raise FormatError("not a quantized tensor file")
    spec = _spec_from_meta(meta)
    if bits != spec.bits:
        raise FormatError(f"header spec {spec} is {spec.bits}-bit but payload holds {bits}-bit codes")
    signed = spec.is_int and spec.symmetric
    if (dtype == SCODES) != signed or dtype not in (UCODES, SCODES):
        raise FormatError(f"payload signedness does not match spec {spec}")
    if list(codes.shape) != list(meta["shape"]):
        raise FormatError("header shape does not match payload dims")
    try:
        grid = tuple(meta["scale_grid"])
        scales = np.array(meta["scales"], dtype=np.float64).reshape(grid)
        zp = meta["zero_points"]
        zero_points = None if zp is None else np.array(zp, dtype=np.int64).reshape(grid)
        rs = meta.get("raw_scales")
        raw = None if rs is None else np.array(rs, dtype=np.float64).reshape(grid)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed quantization header: {exc}") from None
    q = QuantizedTensor(codes, scales, zero_points, tuple(meta["shape"]), spec,
                        raw_scales=raw, meta=meta.get("meta") or {})
    try:
        validate(q)
    except QuantizationError as exc:
        raise FormatError(f"header does not describe the payload: {exc}") from None
    return q


def write_quantized(path, q: QuantizedTensor, lorc_ref: str | None = None) -> None:
    _write(path, dumps_quantized(q, lorc_ref))


def read_quantized(path) -> QuantizedTensor:
    return loads_quantized(_read(path))


def quantized_lorc_ref(path) -> str | None:
    _, _, _, meta = _loads(_read(path))
    return (meta or {}).get("lorc")


# -- LoRC factors -------------------------------------------------------------

def dumps_lorc(f: LorcFactors) -> bytes:
    out, inp = f.shape
    meta = {"kind": "lorc", "rank": f.rank, "out": out, "in": inp,
            "captured_energy": f.captured_energy}
    payload = np.concatenate([f.left.reshape(-1), f.right.reshape(-1)])
    return _dumps(payload, REAL64, 0, meta)


def loads_lorc(blob: bytes) -> LorcFactors:
    arr, dtype, _, meta = _loads(blob)
    if meta is None or meta.get("kind") != "lorc" or dtype != REAL64:
        raise FormatError("not a LoRC factor file")
    r, out, inp = int(meta["rank"]), int(meta["out"]), int(meta["in"])
    if arr.size != r * (out + inp):
        raise FormatError(f"rank header {r} does not match payload of {arr.size} values")
    left = arr[: out * r].reshape(out, r)
    right = arr[out * r:].reshape(r, inp)
    return LorcFactors(left=left, right=right, rank=r, captured_energy=float(meta["captured_energy"]))


def write_lorc(path, f: LorcFactors) -> None:
    _write(path, dumps_lorc(f))


def read_lorc(path) -> LorcFactors:
    return loads_lorc(_read(path))


# -- CSV interop --------------------------------------------------------------

def tensor_to_csv(path, tensor) -> None:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim > 2:
        raise FormatError("CSV holds at most 2-D tensors")
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")


def csv_to_tensor(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
