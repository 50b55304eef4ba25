"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--size N] [--repeat R]
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from morq import kernels
from morq.formats import E4M3


def cases(size: int, rng: np.random.Generator):
    x = (rng.standard_normal((size, size)) * np.exp(rng.normal(0, 3, (size, size)))).astype(
        np.float32
    )
    scales = np.full((-(-size // 32), -(-size // 32)), 0.75, dtype=np.float32)
    fmt = (E4M3.mantissa_bits, E4M3.min_exp, E4M3.max_finite)
    g = max(size // 4, 8)
    a = rng.standard_normal((g, g)).astype(np.float32)
    return {
        "round_float": lambda be: be.round_float(x, *fmt),
        "block_stats": lambda be: be.block_stats(x, 32, 32),
        "fake_quant_grid": lambda be: be.fake_quant_grid(x, 32, 32, scales, *fmt),
        f"gemm_f32 ({g}^3)": lambda be: be.gemm_f32(a, a),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    backends = kernels.backends()
    results = {}
    for name, fn in cases(args.size, np.random.default_rng(0)).items():
        row = {}
        for be_name, be in sorted(backends.items()):
            row[be_name] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        results[name] = row
        cells = "  ".join(f"{k}={v:.4f}{'x' if k == 'speedup' else 's'}" for k, v in row.items())
        print(f"{name:<22} {cells}")
    print(json.dumps(results))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
