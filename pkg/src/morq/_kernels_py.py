"""Pure numpy implementations of the hot kernels.

Each function mirrors one in ``_kernels.pyx`` operation for operation, so the
two backends agree bit for bit. Reductions that feed decisions (relative error
sums) are sequential in row-major block order, never pairwise.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def round_float(x, mantissa_bits: int, min_exp: int, max_finite: float):
    """Round float32 values onto a binary float grid with RNE and saturation.

    ``min_exp`` is the unbiased exponent of the smallest normal, below which the
    quantum stays fixed (subnormals). Signed zeros survive.
    """
    x = np.asarray(x, dtype=np.float32)
    a = np.abs(x).astype(np.float64)
    _, e2 = np.frexp(a)
    exp = np.maximum(e2.astype(np.int64) - 1, min_exp)
    quantum = np.ldexp(1.0, (exp - mantissa_bits).astype(np.int32))
    r = np.rint(a / quantum) * quantum
    r = np.where(a >= max_finite, max_finite, np.minimum(r, max_finite))
    return np.copysign(r, x).astype(np.float32)


def _pad_grid(x, tile_rows: int, tile_cols: int, fill):
    rows, cols = x.shape
    nbr = -(-rows // tile_rows)
    nbc = -(-cols // tile_cols)
    pr, pc = nbr * tile_rows - rows, nbc * tile_cols - cols
    if pr or pc:
        x = np.pad(x, ((0, pr), (0, pc)), constant_values=fill)
    return x.reshape(nbr, tile_rows, nbc, tile_cols).transpose(0, 2, 1, 3).reshape(
        nbr, nbc, tile_rows * tile_cols
    )


def block_stats(x, tile_rows: int, tile_cols: int):
    """Per-tile amax, nonzero min-abs (inf when absent) and nonzero count."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    a = np.abs(x)
    amax = _pad_grid(a, tile_rows, tile_cols, 0.0).max(axis=2)
    masked = np.where(a > 0, a, np.float32(np.inf))
    minabs = _pad_grid(masked, tile_rows, tile_cols, np.inf).min(axis=2)
    nnz = _pad_grid((a > 0).astype(np.int64), tile_rows, tile_cols, 0).sum(axis=2)
    return amax.astype(np.float32), minabs.astype(np.float32), nnz.astype(np.int64)


def fake_quant_grid(x, tile_rows: int, tile_cols: int, scales, mantissa_bits: int,
                    min_exp: int, max_finite: float):
    """Scale, round onto the target grid and measure per-tile relative error.

    Returns ``(rounded, err_sum, nnz)`` where ``rounded`` holds the scaled
    on-grid values (before descale) and ``err_sum`` is the sequential float64
    sum of ``|x - round(x*s)/s| / |x|`` over nonzero elements of each tile.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    scales = np.ascontiguousarray(scales, dtype=np.float32)
    rows, cols = x.shape
    s_full = np.repeat(np.repeat(scales, tile_rows, axis=0), tile_cols, axis=1)[:rows, :cols]
    scaled = x * s_full
    rounded = round_float(scaled, mantissa_bits, min_exp, max_finite)
    out = rounded / s_full
    x64 = x.astype(np.float64)
    nz = x != 0
    err = np.zeros_like(x64)
    np.divide(np.abs(x64 - out.astype(np.float64)), np.abs(x64), out=err, where=nz)
    err_sum = np.cumsum(_pad_grid(err, tile_rows, tile_cols, 0.0), axis=2)[..., -1]
    nnz = _pad_grid(nz.astype(np.int64), tile_rows, tile_cols, 0).sum(axis=2)
    return rounded, err_sum, nnz


def gemm_f32(a, b):
    """FP32 matmul accumulating k ascending, one rounding per multiply and add."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    acc = np.zeros((m, n), dtype=np.float32)
    for kk in range(k):
        acc += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return acc
