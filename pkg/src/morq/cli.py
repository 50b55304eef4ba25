"""Command line entry point: ``morq <subcommand>``.

Exit codes: 0 success, 2 usage or input-format error, 3 divergence in
``train-toy``. Failures also print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from morq import __version__
from morq.fakequant_gemm import block_gemm, fake_quantize
from morq.formats import write_tables
from morq.gam import ScalingStrategy
from morq.harness import TensorStreamSpec, ToyModelConfig, generate_stream, run_replay, train_toy
from morq.mor import DEFAULT_THRESHOLD, RECIPES, get_recipe, mor_quantize
from morq.stats import (
    DEFAULT_RESET_PERIOD,
    TensorKey,
    export_heatmap,
    fallback_percentage,
    fallback_report,
)
from morq.tensor import PartitionSpec, atomic_write, read_mort, write_mort

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail(message, EXIT_USAGE)


def _fail(message: str, code: int):
    sys.stderr.write(json.dumps({"error": message, "exit_code": code}) + "\n")
    sys.exit(code)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MORQ_THREADS", "1")))
    except ValueError:
        return 1


def _partition(text: str) -> PartitionSpec:
    try:
        return PartitionSpec.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _threshold(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("threshold must lie in [0, 1)")
    return v


def _add_mor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--recipe", default="tensor", choices=RECIPES)
    p.add_argument("--partition", type=_partition, default=PartitionSpec.block(128))
    p.add_argument("--strategy", default="gam", choices=[s.value for s in ScalingStrategy])
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def cmd_quantize(args) -> int:
    try:
        t = read_mort(args.input)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read {args.input}: {e}") from None
    recipe = get_recipe(args.recipe, args.threshold)
    out, qt = fake_quantize(t, recipe, args.partition, args.strategy)
    write_mort(args.output, out)
    key = Path(args.input).stem
    rec = qt.decision_record(key, 0, per_block=args.per_block)
    atomic_write(args.log or Path(args.output).with_suffix(".decisions.jsonl"), _jsonl([rec]))
    return 0


_STREAM_NAME = re.compile(r"(?P<label>.+?)(?:@(?P<step>\d+))?$")


def load_stream_dir(path: str | Path) -> list[tuple[object, int, object]]:
    """MORT files named ``<label>[@<step>].mort``; labels following the
    ``decoder.layer.N.module.role[.row|col]`` grammar become tensor keys.
    Files without a step are numbered in name order per label."""
    path = Path(path)
    if not path.is_dir():
        raise CliError(f"{path} is not a directory")
    files = sorted(path.glob("*.mort"))
    if not files:
        raise CliError(f"{path} holds no .mort files")
    seen: dict[str, int] = {}
    items = []
    for f in files:
        m = _STREAM_NAME.match(f.stem)
        label = m.group("label")
        if m.group("step") is not None:
            step = int(m.group("step"))
        else:
            step = seen.get(label, 0)
            seen[label] = step + 1
        try:
            key = TensorKey.parse(label)
        except ValueError:
            key = label
        try:
            items.append((key, step, read_mort(f)))
        except ValueError as e:
            raise CliError(str(e)) from None
    items.sort(key=lambda it: (it[1], str(it[0])))
    return items


def cmd_analyze(args) -> int:
    items = load_stream_dir(args.stream_dir)
    recipe = get_recipe(args.recipe, args.threshold)
    state, log = run_replay(items, recipe, args.partition, args.strategy,
                            reset_period=args.reset_period)
    out = Path(args.output)
    heat = export_heatmap(state, args.ordering)
    atomic_write(out / "heatmap.csv", heat.to_csv())
    atomic_write(out / "heatmap.json", heat.to_json() + "\n")
    atomic_write(out / "fallback.json", json.dumps(fallback_report(state), indent=1) + "\n")
    atomic_write(out / "decisions.jsonl", _jsonl(log))
    return 0


def _sweep_cell(spec: TensorStreamSpec, recipe_name: str, threshold: float,
                partition: PartitionSpec, strategy: str, reset_period: int) -> dict:
    recipe = get_recipe(recipe_name, threshold)
    state, log = run_replay(generate_stream(spec), recipe, partition, strategy,
                            key="stream", reset_period=reset_period)
    errors = [r["global_rel_error"] for r in log]
    fallback = fallback_percentage(state) or 0.0
    fp8_share = 1.0 - fallback
    return {
        "threshold": threshold,
        "partition": str(partition),
        "strategy": strategy,
        "fallback_pct": 100.0 * fallback,
        "mean_rel_error": float(np.mean(errors)) if errors else 0.0,
        # a tensor in FP8 halves its GEMM time; speedup relative to all-BF16
        "speedup_estimate": 1.0 / (1.0 - fp8_share / 2),
    }


def cmd_sweep(args) -> int:
    spec = _stream_spec(args)
    thresholds = [_threshold(t) for t in args.thresholds.split(",")]
    partitions = [_partition(p) for p in args.partitions.split(",")]
    strategies = args.strategies.split(",")
    for s in strategies:
        ScalingStrategy(s)
    cells = [(th, p, s) for p in partitions for s in strategies for th in thresholds]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(
            lambda c: _sweep_cell(spec, args.recipe, *c, args.reset_period), cells))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    atomic_write(args.output, buf.getvalue())
    return 0


def _stream_spec(args) -> TensorStreamSpec:
    if args.stream_config:
        return TensorStreamSpec.from_dict(_load_config(args.stream_config))
    return TensorStreamSpec(
        rows=args.rows, cols=args.cols, steps=args.steps, distribution=args.distribution,
        sigma=args.sigma, outlier_channel_fraction=args.outlier_fraction,
        outlier_magnitude=args.outlier_magnitude, drift=args.drift, seed=args.seed,
    )


def _load_config(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}") from None
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as e:
            raise CliError(f"{path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: {e}") from None


def cmd_train_toy(args) -> int:
    d = _load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = ToyModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad config: {e}") from None
    report = train_toy(cfg)
    atomic_write(args.output, report.to_json() + "\n")
    if report.diverged:
        _fail(f"training diverged at step {report.diverged_at}", EXIT_DIVERGED)
    return 0


def cmd_gemm_bench(args) -> int:
    rng = np.random.default_rng(args.seed)

    def operand(shape):
        if args.distribution == "student-t":
            return rng.standard_t(3, size=shape).astype(np.float32)
        return rng.standard_normal(shape).astype(np.float32)

    a, b = operand((args.m, args.k)), operand((args.k, args.n))
    recipe = get_recipe(args.recipe, args.threshold)
    aq = mor_quantize(a, recipe, args.partition.with_axis("row"), args.strategy)
    bq = mor_quantize(b, recipe, args.partition.with_axis("col"), args.strategy)
    c, cost = block_gemm(aq, bq)
    exact = a.astype(np.float64) @ b.astype(np.float64)
    summary = cost.to_dict()
    summary["expected_macs"] = args.m * args.k * args.n
    summary["rel_frobenius_error"] = float(np.linalg.norm(c - exact) / np.linalg.norm(exact))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_tables(args) -> int:
    for p in write_tables(args.output):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morq", description="Mixture-of-Representations FP8 emulation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="fake-quantize a MORT tensor")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--log", help="decision log path (default: <output>.decisions.jsonl)")
    p.add_argument("--per-block", action="store_true", help="log per-block errors")
    _add_mor_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("analyze", help="replay a directory of MORT tensors")
    p.add_argument("stream_dir")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--reset-period", type=int, default=DEFAULT_RESET_PERIOD)
    p.add_argument("--ordering", choices=["tensor", "step"], default="tensor")
    _add_mor_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="threshold x partition x strategy grid")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--thresholds", default="0.045")
    p.add_argument("--partitions", default="block:128x128")
    p.add_argument("--strategies", default="gam")
    p.add_argument("--recipe", default="tensor", choices=RECIPES)
    p.add_argument("--reset-period", type=int, default=DEFAULT_RESET_PERIOD)
    p.add_argument("--stream-config", help="JSON/TOML stream spec (overrides stream flags)")
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=256)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--distribution", choices=["gaussian", "lognormal"], default="gaussian")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--outlier-magnitude", type=float, default=1.0)
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-toy", help="train the toy MLP from a TOML/JSON config")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gemm-bench", help="mixed-block GEMM cost summary")
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", choices=["gaussian", "student-t"], default="student-t")
    _add_mor_flags(p)
    p.set_defaults(func=cmd_gemm_bench)

    p = sub.add_parser("tables", help="write E4M3/E5M2 decode tables as JSON")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tables)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        _fail(str(e), e.code)
    except (ValueError, OSError) as e:
        _fail(str(e), EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
