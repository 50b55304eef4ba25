from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from morq.formats import (
    BF16,
    E4M3,
    E5M2,
    E8M0,
    FP32,
    compose_fp32,
    decode,
    decode_array,
    decode_table,
    decompose_fp32,
    encode,
    encode_array,
    f32_bits,
    f32_from_bits,
    round_to_format,
    table_records,
)

FP8 = [E4M3, E5M2]
finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


def _same(a: float, b: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return a == b and math.copysign(1, a) == math.copysign(1, b)


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_decode_matches_bitfield_oracle(fmt):
    for code in range(256):
        assert _same(decode(code, fmt), oracles.decode_fields(code, fmt.name)), hex(code)


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_roundtrip_all_codes(fmt):
    for code in range(256):
        v = decode(code, fmt)
        back = encode(v, fmt)
        if math.isnan(v):
            assert math.isnan(decode(back, fmt))
        else:
            assert back == code, hex(code)


def test_nan_canonicalization():
    assert encode(math.nan, E4M3) == 0x7F
    assert encode(-math.nan, E4M3) == 0xFF
    for code in (0x7D, 0x7E, 0x7F):
        assert encode(decode(code, E5M2), E5M2) == 0x7E
    assert encode(math.nan, BF16) == 0x7FC0


def test_extrema():
    assert decode(0x7E, E4M3) == 448.0
    assert decode(0x01, E4M3) == 2.0**-9
    assert decode(0x7B, E5M2) == 57344.0
    assert decode(0x01, E5M2) == 2.0**-16
    assert decode(0x04, E5M2) == 2.0**-14
    assert decode(0x08, E4M3) == 2.0**-6
    assert E4M3.max_finite == 448.0 and E5M2.max_finite == 57344.0


def test_saturation_and_rounding_examples():
    assert encode(500.0, E4M3) == encode(448.0, E4M3) == 0x7E
    assert encode(1e9, E5M2) == 0x7B
    assert decode(encode(3.1, E4M3), E4M3) == 3.0
    assert encode(math.inf, E4M3) == 0x7E
    assert encode(-math.inf, E4M3) == 0xFE
    assert encode(math.inf, E5M2) == 0x7C
    assert encode(-0.0, E4M3) == 0x80
    assert encode(-0.0, E5M2) == 0x80


@pytest.mark.parametrize("fmt", FP8, ids=str)
@given(x=finite_f32)
def test_encode_matches_linear_scan(fmt, x):
    assert encode(x, fmt) == oracles.scan_encode(x, fmt.name)


@pytest.mark.parametrize("fmt", FP8, ids=str)
@given(x=st.floats(min_value=-2.0**-5, max_value=2.0**-5, width=32))
def test_encode_small_values_match_scan(fmt, x):
    assert encode(x, fmt) == oracles.scan_encode(x, fmt.name)


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_midpoints_round_to_even(fmt):
    tab = oracles.table(fmt.name)
    pos = sorted((v, c) for c, v in enumerate(tab) if c < 128 and math.isfinite(v))
    for (lo, clo), (hi, chi) in zip(pos, pos[1:]):
        mid = (lo + hi) / 2
        expect = clo if clo % 2 == 0 else chi
        assert encode(mid, fmt) == expect
        assert encode(-mid, fmt) == expect | 0x80


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_vectorized_codec_matches_scalar(fmt, rng):
    x = (rng.standard_normal(4000) * np.exp(rng.normal(0, 6, 4000))).astype(np.float32)
    x[:4] = [0.0, -0.0, 1e30, -1e30]
    codes = encode_array(x, fmt)
    assert codes.dtype == np.uint8
    assert codes.tolist() == [encode(float(v), fmt) for v in x]
    back = decode_array(codes, fmt)
    assert np.array_equal(back, round_to_format(x, fmt))
    assert np.all(np.abs(back) <= fmt.max_finite)


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_decode_table_is_readonly(fmt):
    t = decode_table(fmt)
    assert t.shape == (256,)
    with pytest.raises(ValueError):
        t[0] = 1.0


@given(x=finite_f32)
def test_bf16_matches_bit_trick(x):
    got = float(round_to_format(np.float32(x), BF16))
    assert _same(got, oracles.round_bf16(x))


def test_bf16_codes():
    assert encode(1.0, BF16) == 0x3F80
    assert encode(-2.0, BF16) == 0xC000
    # 1 + 2^-8 is halfway between 1 and 1 + 2^-7: ties to even
    assert encode(1.0 + 2.0**-8, BF16) == 0x3F80
    assert encode(1.0 + 3 * 2.0**-8, BF16) == 0x3F82
    assert decode(0x3F80, BF16) == 1.0
    assert encode(math.inf, BF16) == 0x7F80
    # finite overflow saturates instead of producing infinity
    assert encode(f32_from_bits(0x7F7FFFFF), BF16) == 0x7F7F


def test_e8m0():
    assert encode(1.0, E8M0) == 127
    assert encode(2.0**-127, E8M0) == 0
    assert encode(2.0**127, E8M0) == 254
    assert decode(130, E8M0) == 8.0
    assert math.isnan(decode(0xFF, E8M0))
    for bad in (3.0, 0.0, -2.0, math.inf):
        with pytest.raises(ValueError):
            encode(bad, E8M0)


def test_fp32_fields():
    assert tuple(decompose_fp32(1.5)) == (0, 127, 0x400000)
    assert tuple(decompose_fp32(-0.75)) == (1, 126, 0x400000)
    f = decompose_fp32(3.0)
    assert compose_fp32(f) == 3.0
    assert compose_fp32(0, 127, 0) == 1.0
    for bad in (0.0, math.inf, math.nan, 1e-40):
        with pytest.raises(ValueError):
            decompose_fp32(bad)
    assert f32_bits(1.0) == 0x3F800000
    assert encode(1.0, FP32) == 0x3F800000


@given(x=finite_f32.filter(lambda v: abs(v) >= 2.0**-126))
def test_fp32_fields_roundtrip(x):
    assert compose_fp32(decompose_fp32(x)) == x


@pytest.mark.parametrize("fmt", FP8, ids=str)
@given(x=finite_f32)
def test_rounding_never_exceeds_max(fmt, x):
    y = float(round_to_format(np.float32(x), fmt))
    assert abs(y) <= fmt.max_finite
    assert math.copysign(1, y) == math.copysign(1, x)


@pytest.mark.parametrize("fmt", FP8, ids=str)
def test_committed_tables_match_codec(fmt):
    ref = resources.files("morq.formats") / "tables" / f"{fmt.name.lower()}.json"
    data = json.loads(ref.read_text())
    assert data["format"] == fmt.name
    assert data["entries"] == table_records(fmt)
    classes = {e["class"] for e in data["entries"]}
    assert {"zero", "subnormal", "normal", "nan"} <= classes
