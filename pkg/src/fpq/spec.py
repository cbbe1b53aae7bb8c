"""Quantization recipes and their config-string grammar.

Grammar (colon separated, every field explicit)::

    int<bits>:<sym|asym>:<granularity>[:<constraint>]
    fp<bits>:<format>:<granularity>[:<constraint>]

    granularity := tensor | token | group<N>
    constraint  := none | m1 | m2 [:<rows>]   (FP4 weights only)

Examples: ``int8:asym:token``, ``fp4:e2m1:group256:m2``, ``fp4:e2m1:group256:m2:4``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .formats import MiniFloatFormat, get_format

FAMILIES = ("int", "fp")
GRANULARITIES = ("tensor", "group", "token")
CONSTRAINTS = ("none", "m1", "m2")


class SpecError(ValueError):
    """A recipe string or QuantSpec is malformed."""


@dataclass(frozen=True)
class QuantSpec:
    family: str
    bits: int
    granularity: str
    symmetric: bool = True
    fmt: MiniFloatFormat | None = None
    group_size: int | None = None
    scale_constraint: str = "none"
    group_rows: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.granularity not in GRANULARITIES:
            raise SpecError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.granularity == "group":
            if self.group_size is None or self.group_size < 1:
                raise SpecError(f"group_size must be a positive integer, got {self.group_size}")
        elif self.group_size is not None:
            raise SpecError("group_size only applies to group granularity")
        if self.family == "int":
            if not 2 <= self.bits <= 16:
                raise SpecError(f"unsupported integer width {self.bits}")
            if self.fmt is not None:
                raise SpecError("integer specs take no minifloat format")
        else:
            if self.fmt is None:
                raise SpecError("fp specs need a minifloat format")
            if self.fmt.total_bits != self.bits:
                raise SpecError(f"format {self.fmt} is {self.fmt.total_bits}-bit, spec says fp{self.bits}")
            if not self.symmetric:
                raise SpecError("minifloat quantization is always symmetric")
        if self.scale_constraint not in CONSTRAINTS:
            raise SpecError(f"scale_constraint must be one of {CONSTRAINTS}, got {self.scale_constraint!r}")
        if self.scale_constraint != "none":
            if self.family != "fp" or self.bits != 4:
                raise SpecError("power-of-two scale constraints apply to FP4 weights only")
            if self.granularity == "token":
                raise SpecError("scale constraints apply to weight (tensor/group) quantization")
        if self.group_rows < 1:
            raise SpecError(f"group_rows must be positive, got {self.group_rows}")

    @property
    def is_int(self) -> bool:
        return self.family == "int"

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.symmetric else (1 << self.bits) - 1

    def with_constraint(self, constraint: str, group_rows: int = 1) -> "QuantSpec":
        return replace(self, scale_constraint=constraint, group_rows=group_rows)

    def unconstrained(self) -> "QuantSpec":
        return replace(self, scale_constraint="none", group_rows=1)

    def __str__(self) -> str:
        parts = [f"{self.family}{self.bits}"]
        if self.is_int:
            parts.append("sym" if self.symmetric else "asym")
        else:
            parts.append(self.fmt.name)
        parts.append(f"group{self.group_size}" if self.granularity == "group" else self.granularity)
        if self.scale_constraint == "m1":
            parts.append("m1")
        elif self.scale_constraint == "m2":
            parts.extend(["m2", str(self.group_rows)])
        return ":".join(parts)


_HEAD_RE = re.compile(r"^(int|fp)(\d+)$")
_GROUP_RE = re.compile(r"^group(\d+)$")


def parse_constraint(text: str) -> tuple[str, int]:
    """Parse ``none``, ``m1``, ``m2`` or ``m2:<rows>``."""
    parts = text.strip().lower().split(":")
    kind = parts[0]
    if kind not in CONSTRAINTS:
        raise SpecError(f"unknown scale constraint {text!r}")
    if len(parts) == 1:
        return kind, 1
    if kind != "m2" or len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
        raise SpecError(f"malformed scale constraint {text!r}")
    return kind, int(parts[1])


def parse_spec(text: str) -> QuantSpec:
    parts = [p for p in text.strip().lower().split(":")]
    if len(parts) < 3:
        raise SpecError(f"spec {text!r} needs family+bits, sym/asym or format, and granularity")
    head = _HEAD_RE.match(parts[0])
    if head is None:
        raise SpecError(f"spec {text!r} must start with int<bits> or fp<bits>")
    family, bits = head.group(1), int(head.group(2))

    kwargs = {}
    if family == "int":
        if parts[1] not in ("sym", "asym"):
            raise SpecError(f"integer spec {text!r} must say sym or asym")
        kwargs["symmetric"] = parts[1] == "sym"
    else:
        try:
            kwargs["fmt"] = get_format(parts[1])
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    gran = parts[2]
    g = _GROUP_RE.match(gran)
    if g is not None:
        kwargs["granularity"] = "group"
        kwargs["group_size"] = int(g.group(1))
    elif gran in ("tensor", "token"):
        kwargs["granularity"] = gran
    else:
        raise SpecError(f"unknown granularity {gran!r} in {text!r}")

    if len(parts) > 3:
        kind, rows = parse_constraint(":".join(parts[3:]))
        kwargs["scale_constraint"] = kind
        kwargs["group_rows"] = rows
    return QuantSpec(family=family, bits=bits, **kwargs)
