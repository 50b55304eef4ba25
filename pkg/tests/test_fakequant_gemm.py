from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import bits_equal
from morq.fakequant_gemm import (
    PrecisionCost,
    block_gemm,
    fake_quantize,
    gemm_cost,
    reference_gemm,
)
from morq.mor import RepType, get_recipe, mor_quantize, static_recipe, three_way_recipe
from morq.tensor import PartitionSpec


def _operand(rng, shape, heavy=True):
    x = rng.standard_t(3, size=shape) if heavy else rng.standard_normal(shape)
    return x.astype(np.float32)


def _force_tags(qt, tags):
    qt.tags = np.asarray(tags, dtype=np.uint8).reshape(qt.tags.shape)
    return qt


def brute_cost(aq, bq) -> PrecisionCost:
    """Walk every (i, k, j) triple and classify it by its two blocks' tags."""
    m, k = aq.shape
    n = bq.shape[1]
    at, bt = aq.element_tags(), bq.element_tags()
    fp8 = 0
    for i in range(m):
        for j in range(n):
            fp8 += int(np.sum((at[i, :] != 2) & (bt[:, j] != 2)))
    atr, atc = aq.tile
    btr, btc = bq.tile
    pairs = upcast = 0
    for bi in range(aq.tags.shape[0]):
        for bk in range(aq.tags.shape[1]):
            for ck in range(bq.tags.shape[0]):
                lo = max(bk * atc, ck * btr)
                hi = min((bk + 1) * atc, (ck + 1) * btr, k)
                if hi <= lo:
                    continue
                for bj in range(bq.tags.shape[1]):
                    pairs += 1
                    fa, fb = aq.tags[bi, bk] != 2, bq.tags[ck, bj] != 2
                    upcast += int(fa != fb)
    return PrecisionCost(fp8, m * k * n - fp8, upcast, pairs)


def test_fake_quantize_returns_values_and_decisions(rng):
    x = _operand(rng, (9, 14))
    out, qt = fake_quantize(x, three_way_recipe(), PartitionSpec.block(4, 5))
    assert out.dtype == np.float32 and out.shape == x.shape
    ref, tags = oracles.fake_quantize(x, "three-way", "block:4x5", "gam")
    assert bits_equal(out, ref)
    assert [d.value for d in qt.decisions.values()] == tags


def test_representable_values_pass_through():
    grid = np.array([[0.5, -1.0, 2.0, 448.0], [3.0, -0.125, 0.0, 96.0]], dtype=np.float32)
    out, _ = fake_quantize(grid, static_recipe("e4m3"), PartitionSpec.per_tensor(), "amax")
    assert bits_equal(out, grid)


def test_reference_gemm_matches_sequential_oracle(rng):
    a, b = _operand(rng, (5, 17)), _operand(rng, (17, 4))
    assert bits_equal(reference_gemm(a, b), oracles.gemm_f32(a, b))
    with pytest.raises(ValueError):
        reference_gemm(a, a)


@pytest.mark.parametrize(
    "pa,pb",
    [
        ("block:4x4", "block:4x4"),
        ("block:3x5", "block:4x2"),
        ("channel:row", "channel:col"),
        ("tensor", "block:6x3"),
        ("subchannel:row:4", "subchannel:col:3"),
    ],
)
def test_cost_matches_brute_force(rng, pa, pb):
    a, b = _operand(rng, (10, 13)), _operand(rng, (13, 7))
    aq = mor_quantize(a, three_way_recipe(), PartitionSpec.parse(pa))
    bq = mor_quantize(b, three_way_recipe(), PartitionSpec.parse(pb))
    for seed in range(4):
        r = np.random.default_rng(seed)
        _force_tags(aq, r.integers(0, 3, aq.tags.size))
        _force_tags(bq, r.integers(0, 3, bq.tags.size))
        cost = gemm_cost(aq, bq)
        assert cost == brute_cost(aq, bq)
        assert cost.total_macs == 10 * 13 * 7
        assert cost.upcast_blocks <= cost.block_pairs


@given(seed=st.integers(0, 2**16), tags_a=st.integers(0, 2**9 - 1), tags_b=st.integers(0, 2**9 - 1))
def test_block_gemm_equals_reference_for_any_tag_mix(seed, tags_a, tags_b):
    rng = np.random.default_rng(seed)
    a, b = _operand(rng, (6, 9)), _operand(rng, (9, 6))
    aq = mor_quantize(a, three_way_recipe(), PartitionSpec.block(2, 3))
    bq = mor_quantize(b, three_way_recipe(), PartitionSpec.block(3, 2))
    assert aq.tags.size == bq.tags.size == 9
    _force_tags(aq, [2 * ((tags_a >> i) & 1) for i in range(9)])
    _force_tags(bq, [2 * ((tags_b >> i) & 1) for i in range(9)])
    c, cost = block_gemm(aq, bq)
    assert bits_equal(c, reference_gemm(aq.fake_values(), bq.fake_values()))
    assert cost.fp8_macs + cost.bf16_macs == 6 * 9 * 6


def test_extreme_tag_mixes(rng):
    a, b = _operand(rng, (8, 8)), _operand(rng, (8, 8))
    aq = mor_quantize(a, static_recipe("e4m3"), PartitionSpec.block(4))
    bq = mor_quantize(b, static_recipe("e4m3"), PartitionSpec.block(4))
    cost = gemm_cost(aq, bq)
    assert cost.upcast_blocks == 0 and cost.bf16_macs == 0
    assert cost.speedup_estimate() == 2.0
    abf = mor_quantize(a, static_recipe("bf16"), PartitionSpec.block(4))
    cost = gemm_cost(abf, bq)
    assert cost.fp8_macs == 0 and cost.upcast_blocks == cost.block_pairs == 8
    assert cost.speedup_estimate() == 1.0


def test_more_fp8_never_raises_bf16_macs(rng):
    a, b = _operand(rng, (12, 12)), _operand(rng, (12, 12))
    aq = mor_quantize(a, three_way_recipe(), PartitionSpec.block(4))
    bq = mor_quantize(b, three_way_recipe(), PartitionSpec.block(4))
    _force_tags(aq, np.full(9, 2))
    _force_tags(bq, np.full(9, 0))
    prev = gemm_cost(aq, bq).bf16_macs
    for i in range(9):
        tags = aq.tags.ravel().copy()
        tags[i] = 0
        _force_tags(aq, tags)
        now = gemm_cost(aq, bq).bf16_macs
        assert now <= prev
        prev = now
    assert prev == 0


def test_precision_cost_arithmetic():
    c = PrecisionCost(10, 30, 1, 4) + PrecisionCost(20, 0, 0, 2)
    assert c == PrecisionCost(30, 30, 1, 6)
    d = c.to_dict()
    assert d["total_macs"] == 60
    assert d["speedup_estimate"] == pytest.approx(60 / 45)
    assert PrecisionCost().speedup_estimate() == 1.0


def test_transposed_operand_cost(rng):
    w = _operand(rng, (6, 10))
    x = _operand(rng, (5, 10))
    xq = mor_quantize(x, get_recipe("tensor"), PartitionSpec.per_channel("row"))
    wq = mor_quantize(w, get_recipe("tensor"), PartitionSpec.per_channel("row"))
    c, cost = block_gemm(xq, wq.T)
    assert c.shape == (5, 6)
    assert cost.total_macs == 5 * 10 * 6
    assert all(v is RepType.E4M3 for v in wq.T.decisions.values())
