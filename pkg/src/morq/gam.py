"""Scaling factors: Group Amax Mantissa (GAM), per-block FP32 amax, and E8M0.

Ideal scales ``q_amax / amax`` are FP32 quotients rounded toward zero, so
``scale * amax <= q_amax`` holds exactly in real arithmetic and the largest
element never saturates. A round-to-nearest quotient overshoots by up to one
ulp for roughly half of all amax values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from morq.formats import compose_fp32, f32, f32_bits
from morq.tensor import BlockView, PartitionSpec, TensorF32, as_tensor, block_amax

FLT_MAX = float(np.finfo(np.float32).max)
E8M0_MIN_CODE = 1
E8M0_MAX_CODE = 254
UNIT_EXPONENT = 127  # E8M0 / FP32 biased code of 2**0
MANTISSA_MASK = 0x7FFFFF


class ScalingStrategy(str, Enum):
    GAM = "gam"
    AMAX = "amax"
    E8M0 = "e8m0"


def rtz_div(q_amax: float, amax: float) -> float:
    """Largest float32 ``s`` with ``s * amax <= q_amax`` (``amax > 0``)."""
    if q_amax / amax > FLT_MAX:
        return FLT_MAX
    s = f32(q_amax / amax)
    if s * amax > q_amax:  # exact: product of two float32 fits a double
        s = float(np.nextafter(np.float32(s), np.float32(0)))
    return s


def rtz_div_array(q_amax: float, amax: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rtz_div`; entries with ``amax == 0`` map to 1.0."""
    amax = np.asarray(amax, dtype=np.float32)
    zero = amax == 0
    safe = np.where(zero, np.float32(1), amax)
    with np.errstate(over="ignore"):
        s = np.float32(q_amax) / safe
    s = np.where(np.isinf(s), np.float32(FLT_MAX), s)
    over = s.astype(np.float64) * safe.astype(np.float64) > q_amax
    s = np.where(over, np.nextafter(s, np.float32(0)), s)
    return np.where(zero, np.float32(1), s).astype(np.float32)


def fp32_amax_scale(b_amax: float, q_amax: float) -> float:
    """Standard amax scaling: maps ``b_amax`` onto ``q_amax``; zero blocks get 1."""
    if q_amax <= 0:
        raise ValueError("q_amax must be positive")
    if b_amax == 0:
        return 1.0
    return rtz_div(q_amax, b_amax)


def e8m0_scale(b_amax: float, q_amax: float) -> int:
    """E8M0 code of the largest power of two ``p`` with ``p * b_amax <= q_amax``."""
    if q_amax <= 0:
        raise ValueError("q_amax must be positive")
    if b_amax == 0:
        return UNIT_EXPONENT
    k = math.frexp(q_amax / b_amax)[1] - 1
    while math.ldexp(b_amax, k) > q_amax:
        k -= 1
    while math.ldexp(b_amax, k + 1) <= q_amax:
        k += 1
    return min(max(k + UNIT_EXPONENT, E8M0_MIN_CODE), E8M0_MAX_CODE)


def e8m0_codes(amax: np.ndarray, q_amax: float) -> np.ndarray:
    """Vectorized :func:`e8m0_scale`."""
    a = np.asarray(amax, dtype=np.float64)
    zero = a == 0
    safe = np.where(zero, 1.0, a)
    with np.errstate(over="ignore", divide="ignore"):
        k = np.frexp(q_amax / safe)[1].astype(np.int64) - 1
    k = np.where(np.ldexp(safe, k) > q_amax, k - 1, k)
    k = np.where(np.ldexp(safe, k + 1) <= q_amax, k + 1, k)
    codes = np.clip(k + UNIT_EXPONENT, E8M0_MIN_CODE, E8M0_MAX_CODE)
    return np.where(zero, UNIT_EXPONENT, codes).astype(np.uint8)


def e8m0_value(code) -> np.ndarray | float:
    if np.ndim(code):
        return np.ldexp(np.float32(1), np.asarray(code, dtype=np.int32) - UNIT_EXPONENT).astype(
            np.float32
        )
    return math.ldexp(1.0, int(code) - UNIT_EXPONENT)


@dataclass
class GamScale:
    """Shared 23-bit mantissa per group plus an E8M0 exponent per block."""

    group_mantissas: np.ndarray  # uint32, one per group
    block_exponents: np.ndarray  # uint8 biased codes, one per block
    group_of_block: np.ndarray  # intp, block_id -> group_id
    q_amax: float
    clamped_blocks: tuple[int, ...] = field(default=())

    @property
    def n_groups(self) -> int:
        return len(self.group_mantissas)

    @property
    def n_blocks(self) -> int:
        return len(self.block_exponents)

    def storage_bits(self) -> int:
        return 23 * self.n_groups + 8 * self.n_blocks

    def reconstruct(self, block_id: int) -> float:
        exp = int(self.block_exponents[block_id])
        if not E8M0_MIN_CODE <= exp <= E8M0_MAX_CODE:
            raise ValueError(f"exponent code {exp} does not compose a normal FP32 scale")
        m = int(self.group_mantissas[self.group_of_block[block_id]])
        return compose_fp32(0, exp, m)

    def reconstruct_all(self) -> np.ndarray:
        bits = (self.block_exponents.astype(np.uint32) << 23) | self.group_mantissas[
            self.group_of_block
        ].astype(np.uint32)
        return bits.view(np.float32)

    def to_json(self) -> str:
        return json.dumps(
            {
                "group_mantissas": [f"0x{int(m):06X}" for m in self.group_mantissas],
                "block_exponents": [int(e) for e in self.block_exponents],
                "group_of_block": [int(g) for g in self.group_of_block],
                "q_amax": self.q_amax,
                "clamped_blocks": list(self.clamped_blocks),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> GamScale:
        d = json.loads(text)
        return cls(
            np.array([int(m, 16) for m in d["group_mantissas"]], dtype=np.uint32),
            np.array(d["block_exponents"], dtype=np.uint8),
            np.array(d["group_of_block"], dtype=np.intp),
            float(d["q_amax"]),
            tuple(d.get("clamped_blocks", ())),
        )


def gam_from_amax(block_amaxes, q_amax: float, group_of_block=None) -> GamScale:
    """GAM scales from per-block amax values (flattened in block order)."""
    if q_amax <= 0:
        raise ValueError("q_amax must be positive")
    amax = np.asarray(block_amaxes, dtype=np.float32).reshape(-1)
    groups = (
        np.zeros(amax.shape, dtype=np.intp)
        if group_of_block is None
        else np.asarray(group_of_block, dtype=np.intp).reshape(-1)
    )
    if groups.shape != amax.shape:
        raise ValueError("group map must assign every block")
    n_groups = int(groups.max()) + 1 if groups.size else 0
    g_amax = np.zeros(n_groups, dtype=np.float32)
    np.maximum.at(g_amax, groups, amax)
    g_bits = rtz_div_array(q_amax, g_amax).view(np.uint32)
    m_g = np.where(g_amax == 0, 0, g_bits & MANTISSA_MASK).astype(np.uint32)

    b_bits = rtz_div_array(q_amax, amax).view(np.uint32)
    e_b = ((b_bits >> 23) & 0xFF).astype(np.int64)
    m_b = b_bits & MANTISSA_MASK
    # round the exponent down when the shared mantissa exceeds the block's own
    e_b = np.where(m_g[groups] <= m_b, e_b, e_b - 1)
    with np.errstate(divide="ignore"):
        overflow = q_amax / amax.astype(np.float64) > FLT_MAX
    clamped = (e_b < E8M0_MIN_CODE) | (e_b > E8M0_MAX_CODE) | overflow
    zero = amax == 0
    e_b = np.where(zero, UNIT_EXPONENT, np.clip(e_b, E8M0_MIN_CODE, E8M0_MAX_CODE))
    flagged = tuple(int(i) for i in np.flatnonzero(clamped & ~zero))
    return GamScale(m_g, e_b.astype(np.uint8), groups, float(q_amax), flagged)


def gam_compute(
    t,
    blocks: Sequence[BlockView] | PartitionSpec,
    groups=None,
    q_amax: float = 448.0,
) -> GamScale:
    """Group Amax Mantissa scaling for a tensor split into blocks.

    ``groups`` maps block_id to group_id; the default puts every block in a
    single group spanning the tensor.
    """
    t = as_tensor(t)
    if isinstance(blocks, PartitionSpec):
        amax = t.grid_stats(blocks)[0].reshape(-1)
    else:
        amax = np.array([block_amax(t, b) for b in blocks], dtype=np.float32)
    if isinstance(groups, dict):
        groups = np.array([groups[i] for i in range(len(amax))], dtype=np.intp)
    return gam_from_amax(amax, q_amax, groups)


def gam_reconstruct(s: GamScale, block_id: int) -> float:
    return s.reconstruct(block_id)


def block_scales(amax_grid: np.ndarray, strategy: ScalingStrategy | str, q_amax: float):
    """Per-block float32 scales for ``strategy``, plus its native metadata.

    Metadata is a :class:`GamScale` for GAM, an array of E8M0 codes for E8M0
    and ``None`` for FP32 amax scaling.
    """
    strategy = ScalingStrategy(strategy)
    amax_grid = np.asarray(amax_grid, dtype=np.float32)
    if strategy is ScalingStrategy.AMAX:
        return rtz_div_array(q_amax, amax_grid), None
    if strategy is ScalingStrategy.E8M0:
        codes = e8m0_codes(amax_grid, q_amax)
        return e8m0_value(codes).reshape(amax_grid.shape), codes
    gam = gam_from_amax(amax_grid, q_amax)
    return gam.reconstruct_all().reshape(amax_grid.shape), gam
