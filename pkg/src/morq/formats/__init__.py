"""Bit-exact codecs for E4M3, E5M2, BF16, E8M0 and FP32 field access."""

from morq.formats.codec import (
    BF16,
    E4M3,
    E5M2,
    E8M0,
    FP32,
    FORMATS,
    FloatFormat,
    Fp32Fields,
    compose_fp32,
    decode,
    decode_array,
    decode_table,
    decompose_fp32,
    encode,
    encode_array,
    f32,
    f32_bits,
    f32_from_bits,
    round_to_format,
    table_records,
    write_tables,
)

__all__ = [
    "BF16",
    "E4M3",
    "E5M2",
    "E8M0",
    "FP32",
    "FORMATS",
    "FloatFormat",
    "Fp32Fields",
    "compose_fp32",
    "decode",
    "decode_array",
    "decode_table",
    "decompose_fp32",
    "encode",
    "encode_array",
    "f32",
    "f32_bits",
    "f32_from_bits",
    "round_to_format",
    "table_records",
    "write_tables",
]
