"""Numeric format definitions and bit-exact encode/decode.

Conventions:

* Rounding is round-to-nearest-even everywhere, subnormals included.
* Finite values beyond ``max_finite`` saturate to ``±max_finite``.
* E4M3 follows OFP8: no infinities, NaN is ``S.1111.111`` (one per sign);
  infinite inputs saturate. NaN inputs encode to ``0x7F`` / ``0xFF``.
* E5M2 and BF16 are IEEE-like. NaN inputs encode to the canonical quiet
  pattern (``0x7E`` for E5M2, ``0x7FC0`` for BF16), so E5M2 NaN payloads
  ``0x7D``/``0x7F`` collapse to ``0x7E`` on a decode/encode round trip.
* Negative zero keeps its sign bit.
* E8M0 is unsigned: code ``c`` is ``2**(c - 127)`` and ``0xFF`` is NaN.
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from morq import kernels


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    max_finite: float
    min_normal: float
    min_subnormal: float
    has_infinity: bool
    nan_convention: str  # "ieee" | "single-pattern" | "none"
    signed: bool = True

    @property
    def width(self) -> int:
        return int(self.signed) + self.exponent_bits + self.mantissa_bits

    @property
    def min_exp(self) -> int:
        """Unbiased exponent of the smallest normal number."""
        return 1 - self.bias

    def __str__(self) -> str:
        return self.name


E4M3 = FloatFormat("E4M3", 4, 3, 7, 448.0, 2.0**-6, 2.0**-9, False, "single-pattern")
E5M2 = FloatFormat("E5M2", 5, 2, 15, 57344.0, 2.0**-14, 2.0**-16, True, "ieee")
BF16 = FloatFormat(
    "BF16", 8, 7, 127, (2.0 - 2.0**-7) * 2.0**127, 2.0**-126, 2.0**-133, True, "ieee"
)
FP32 = FloatFormat(
    "FP32", 8, 23, 127, (2.0 - 2.0**-23) * 2.0**127, 2.0**-126, 2.0**-149, True, "ieee"
)
E8M0 = FloatFormat(
    "E8M0", 8, 0, 127, 2.0**127, 2.0**-127, 2.0**-127, False, "single-pattern", signed=False
)

FORMATS = {f.name: f for f in (E4M3, E5M2, BF16, FP32, E8M0)}

_NAN_CODE = {"E4M3": 0x7F, "E5M2": 0x7E, "BF16": 0x7FC0}
_INF_CODE = {"E5M2": 0x7C, "BF16": 0x7F80}


def f32(x: float) -> float:
    """Round a Python float to the nearest float32 (RNE)."""
    return float(np.float32(x))


def f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def f32_from_bits(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]


class Fp32Fields(NamedTuple):
    sign: int
    exponent_field: int
    mantissa_field: int


def decompose_fp32(x: float) -> Fp32Fields:
    """Split a normal float32 into sign, biased exponent and 23-bit mantissa."""
    bits = f32_bits(x)
    fields = Fp32Fields(bits >> 31, (bits >> 23) & 0xFF, bits & 0x7FFFFF)
    if fields.exponent_field == 0 or fields.exponent_field == 0xFF:
        raise ValueError(f"decompose_fp32 needs a finite normal nonzero value, got {x!r}")
    return fields


def compose_fp32(sign: int | Fp32Fields, exponent_field: int = 0, mantissa_field: int = 0) -> float:
    if isinstance(sign, Fp32Fields):
        sign, exponent_field, mantissa_field = sign
    if not (0 <= exponent_field <= 0xFF and 0 <= mantissa_field < (1 << 23) and sign in (0, 1)):
        raise ValueError("FP32 field out of range")
    return f32_from_bits((sign << 31) | (exponent_field << 23) | mantissa_field)


def _check_code(code: int, fmt: FloatFormat) -> None:
    if not 0 <= code < (1 << fmt.width):
        raise ValueError(f"code {code:#x} does not fit {fmt.name}")


def decode(code: int, fmt: FloatFormat) -> float:
    """Exact value of a bit pattern."""
    code = int(code)
    _check_code(code, fmt)
    if fmt is FP32 or fmt.name == "FP32":
        return f32_from_bits(code)
    if fmt.name == "E8M0":
        return math.nan if code == 0xFF else math.ldexp(1.0, code - fmt.bias)
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    sign = -1.0 if code >> (e + m) else 1.0
    ef = (code >> m) & ((1 << e) - 1)
    mf = code & ((1 << m) - 1)
    top = (1 << e) - 1
    if ef == top:
        if fmt.nan_convention == "ieee":
            return math.copysign(math.inf, sign) if mf == 0 else math.nan
        if mf == (1 << m) - 1:
            return math.nan
    if ef == 0:
        mag = math.ldexp(mf, fmt.min_exp - m)
    else:
        mag = math.ldexp((1 << m) + mf, ef - fmt.bias - m)
    return math.copysign(mag, sign)


def _round_scalar(a: float, fmt: FloatFormat) -> float:
    # a >= 0, finite
    if a >= fmt.max_finite:
        return fmt.max_finite
    if a == 0.0:
        return 0.0
    exp = max(math.frexp(a)[1] - 1, fmt.min_exp)
    quantum = math.ldexp(1.0, exp - fmt.mantissa_bits)
    return min(round(a / quantum) * quantum, fmt.max_finite)


def _magnitude_code(a: float, fmt: FloatFormat) -> int:
    # a is a nonnegative value exactly on the format grid
    m = fmt.mantissa_bits
    if a < fmt.min_normal:
        return int(a / fmt.min_subnormal)
    exp = math.frexp(a)[1] - 1
    frac = int(math.ldexp(a, m - exp)) - (1 << m)
    return ((exp + fmt.bias) << m) | frac


def encode(value: float, fmt: FloatFormat) -> int:
    """Encode an FP32 value, rounding to nearest even and saturating."""
    if fmt.name == "FP32":
        return f32_bits(value)
    if fmt.name == "E8M0":
        if not (value > 0 and math.isfinite(value)):
            raise ValueError(f"E8M0 needs a positive power of two, got {value!r}")
        mant, e2 = math.frexp(value)
        code = e2 - 1 + fmt.bias
        if mant != 0.5 or not 0 <= code < 0xFF:
            raise ValueError(f"E8M0 needs a power of two in [2^-127, 2^127], got {value!r}")
        return code
    v = f32(value)
    sign_bit = 1 << (fmt.width - 1)
    sign = sign_bit if math.copysign(1.0, v) < 0 else 0
    if math.isnan(v):
        return _NAN_CODE[fmt.name] | sign
    if math.isinf(v):
        if fmt.has_infinity:
            return _INF_CODE[fmt.name] | sign
        return _magnitude_code(fmt.max_finite, fmt) | sign
    return _magnitude_code(_round_scalar(abs(v), fmt), fmt) | sign


@functools.lru_cache(maxsize=None)
def _table(name: str) -> np.ndarray:
    fmt = FORMATS[name]
    table = np.array([decode(c, fmt) for c in range(1 << fmt.width)], dtype=np.float32)
    table.setflags(write=False)
    return table


def decode_table(fmt: FloatFormat) -> np.ndarray:
    """Read-only float32 array mapping every 8-bit code to its value."""
    if fmt.width != 8:
        raise ValueError(f"decode tables exist for 8-bit formats only, not {fmt.name}")
    return _table(fmt.name)


@functools.lru_cache(maxsize=None)
def _positive_grid(name: str) -> np.ndarray:
    fmt = FORMATS[name]
    table = _table(name)
    half = 1 << (fmt.width - 1)
    pos = table[:half]
    return pos[np.isfinite(pos)]


def round_to_format(x, fmt: FloatFormat) -> np.ndarray:
    """Vectorized RNE rounding of float32 values onto ``fmt`` (saturating)."""
    if fmt.name not in ("E4M3", "E5M2", "BF16"):
        raise ValueError(f"cannot round onto {fmt.name}")
    return kernels.round_float(x, fmt.mantissa_bits, fmt.min_exp, fmt.max_finite)


def encode_array(x, fmt: FloatFormat) -> np.ndarray:
    """Vectorized :func:`encode` for E4M3, E5M2 and BF16."""
    x = np.asarray(x, dtype=np.float32)
    nan = np.isnan(x)
    inf = np.isinf(x)
    r = round_to_format(np.where(nan | inf, 0, x), fmt)
    neg = np.signbit(np.where(nan, x, np.where(inf, x, r)))
    if fmt.name == "BF16":
        codes = (r.view(np.uint32) >> 16).astype(np.uint16) & np.uint16(0x7FFF)
        dtype = np.uint16
    else:
        grid = _positive_grid(fmt.name)
        codes = np.searchsorted(grid, np.abs(r)).astype(np.uint16)
        dtype = np.uint8
    codes = np.where(nan, _NAN_CODE[fmt.name], codes)
    if fmt.has_infinity:
        codes = np.where(inf, _INF_CODE[fmt.name], codes)
    else:
        codes = np.where(inf, _magnitude_code(fmt.max_finite, fmt), codes)
    codes = codes | np.where(neg, 1 << (fmt.width - 1), 0)
    return codes.astype(dtype)


def decode_array(codes, fmt: FloatFormat) -> np.ndarray:
    codes = np.asarray(codes)
    if fmt.name == "BF16":
        return (codes.astype(np.uint32) << 16).view(np.float32)
    return decode_table(fmt)[codes.astype(np.intp)]


def _classify(code: int, fmt: FloatFormat) -> str:
    v = decode(code, fmt)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    if v == 0:
        return "zero"
    return "subnormal" if abs(v) < fmt.min_normal else "normal"


def table_records(fmt: FloatFormat) -> list[dict]:
    return [
        {"code": f"0x{c:02X}", "value": repr(decode(c, fmt)), "class": _classify(c, fmt)}
        for c in range(1 << fmt.width)
    ]


def write_tables(directory: str | Path) -> list[Path]:
    """Write ``e4m3.json`` and ``e5m2.json`` decode maps into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in (E4M3, E5M2):
        path = directory / f"{fmt.name.lower()}.json"
        payload = {"format": fmt.name, "entries": table_records(fmt)}
        path.write_text(json.dumps(payload, indent=1) + "\n")
        paths.append(path)
    return paths
