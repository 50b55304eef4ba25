"""Fake quantization and mixed-block GEMM emulation with MAC cost accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from morq import kernels
from morq.gam import ScalingStrategy
from morq.mor import TAG_CODE, QuantizedTensor, Recipe, RepType, mor_quantize
from morq.tensor import PartitionSpec


def fake_quantize(
    t,
    recipe: Recipe | None = None,
    partition: PartitionSpec | None = None,
    strategy: ScalingStrategy | str = ScalingStrategy.GAM,
) -> tuple[np.ndarray, QuantizedTensor]:
    """Scale, encode, decode and descale each block with its decided format.

    BF16 blocks go through plain FP32 -> BF16 -> FP32 rounding. Returns the
    float32 result (same shape) and the :class:`QuantizedTensor` carrying the
    decisions; ``qt.decision_record()`` gives the loggable form.
    """
    qt = mor_quantize(t, recipe, partition, strategy)
    return qt.fake_values(), qt


@dataclass
class PrecisionCost:
    fp8_macs: int = 0
    bf16_macs: int = 0
    upcast_blocks: int = 0
    block_pairs: int = 0

    @property
    def total_macs(self) -> int:
        return self.fp8_macs + self.bf16_macs

    def speedup_estimate(self) -> float:
        """BF16-relative speedup assuming FP8 MACs run at twice the rate."""
        denom = self.bf16_macs + self.fp8_macs / 2
        return self.total_macs / denom if denom else 1.0

    def __add__(self, other: PrecisionCost) -> PrecisionCost:
        return PrecisionCost(
            self.fp8_macs + other.fp8_macs,
            self.bf16_macs + other.bf16_macs,
            self.upcast_blocks + other.upcast_blocks,
            self.block_pairs + other.block_pairs,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_macs"] = self.total_macs
        d["speedup_estimate"] = self.speedup_estimate()
        return d


def reference_gemm(a, b) -> np.ndarray:
    """FP32 multiply-accumulate with k ascending; the bit-exact reference."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return kernels.gemm_f32(a, b)


def _edges(n: int, tile: int) -> np.ndarray:
    return np.minimum(np.arange(0, n + tile, tile)[: -(-n // tile) + 1], n)


def gemm_cost(aq: QuantizedTensor, bq: QuantizedTensor) -> PrecisionCost:
    """MACs per precision class over all block pairs sharing contraction indices.

    A pair runs in FP8 only when both blocks are FP8-tagged; otherwise it runs
    in BF16, and counts as an upcast when exactly one side was FP8.
    """
    m, k = aq.shape
    k2, n = bq.shape
    if k != k2:
        raise ValueError(f"shape mismatch: {aq.shape} @ {bq.shape}")
    atr, atc = aq.tile
    btr, btc = bq.tile
    rows_a = np.diff(_edges(m, atr)).astype(np.int64)
    cols_b = np.diff(_edges(n, btc)).astype(np.int64)
    ka, kb = _edges(k, atc), _edges(k, btr)
    overlap = np.maximum(
        0,
        np.minimum(ka[1:, None], kb[None, 1:]) - np.maximum(ka[:-1, None], kb[None, :-1]),
    ).astype(np.int64)
    fa = (aq.tags != TAG_CODE[RepType.BF16]).astype(np.int64)
    fb = (bq.tags != TAG_CODE[RepType.BF16]).astype(np.int64)
    fp8 = int(rows_a @ fa @ overlap @ fb @ cols_b)
    total = m * k * n
    touch = (overlap > 0).astype(np.int64)
    ones_a, ones_b = np.ones_like(fa), np.ones_like(fb)
    pairs = int(ones_a.sum(axis=0) @ touch @ ones_b.sum(axis=1))
    both = int(fa.sum(axis=0) @ touch @ fb.sum(axis=1))
    either = int(fa.sum(axis=0) @ touch @ ones_b.sum(axis=1)) + int(
        ones_a.sum(axis=0) @ touch @ fb.sum(axis=1)
    )
    return PrecisionCost(fp8, total - fp8, either - 2 * both, pairs)


def block_gemm(aq: QuantizedTensor, bq: QuantizedTensor) -> tuple[np.ndarray, PrecisionCost]:
    """Emulated GEMM of two MoR-quantized operands.

    Numerics are the FP32 product of the dequantized operands; the tags only
    affect the cost record, since an upcast FP8 block dequantizes to the same
    values either way.
    """
    cost = gemm_cost(aq, bq)
    return reference_gemm(aq.fake_values(), bq.fake_values()), cost
