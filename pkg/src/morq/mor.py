"""Mixture-of-Representations: per-tensor and per-block format selection.

The engine walks an ordered list of representation types, most aggressive
first. A block takes the first type whose acceptance metric passes and the
last type unconditionally. Metrics are evaluated for every block at once from
per-format quantization passes; the pass that measures the error is the same
one that produces the payload.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np

from morq import formats, kernels
from morq.formats import FloatFormat
from morq.gam import GamScale, ScalingStrategy, block_scales
from morq.tensor import BlockView, PartitionSpec, TensorF32, as_tensor

DEFAULT_THRESHOLD = 0.045
E5M2_RANGE_LIMIT = 57344.0 / 2.0**-14


class RepType(str, Enum):
    E4M3 = "E4M3"
    E5M2 = "E5M2"
    BF16 = "BF16"

    @property
    def fmt(self) -> FloatFormat:
        return formats.FORMATS[self.value]

    @property
    def is_fp8(self) -> bool:
        return self is not RepType.BF16


TAG_ORDER = (RepType.E4M3, RepType.E5M2, RepType.BF16)
TAG_CODE = {t: i for i, t in enumerate(TAG_ORDER)}


class Metric(str, Enum):
    REL_ERROR = "rel_error"  # mean relative error below the threshold
    E4M3_BEATS_E5M2 = "e4m3_beats_e5m2"  # summed E4M3 error < summed E5M2 error
    E5M2_RANGE = "e5m2_range"  # amax / nonzero min-abs fits E5M2's normal range


class Granularity(str, Enum):
    TENSOR = "tensor"
    SUBTENSOR = "subtensor"


@dataclass(frozen=True)
class Recipe:
    name: str
    types: tuple[RepType, ...]
    metrics: tuple[Metric, ...]
    granularity: Granularity = Granularity.SUBTENSOR
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if len(self.metrics) != len(self.types) - 1:
            raise ValueError("a recipe needs exactly one metric per non-terminal type")
        if not self.types:
            raise ValueError("a recipe needs at least one type")


def tensor_recipe(threshold: float = DEFAULT_THRESHOLD) -> Recipe:
    """Tensor-level MoR: one E4M3/BF16 decision from the global mean error."""
    return Recipe(
        "tensor", (RepType.E4M3, RepType.BF16), (Metric.REL_ERROR,), Granularity.TENSOR, threshold
    )


def three_way_recipe() -> Recipe:
    return Recipe(
        "three-way",
        (RepType.E4M3, RepType.E5M2, RepType.BF16),
        (Metric.E4M3_BEATS_E5M2, Metric.E5M2_RANGE),
    )


def two_way_recipe() -> Recipe:
    return Recipe("two-way", (RepType.E4M3, RepType.BF16), (Metric.E4M3_BEATS_E5M2,))


def static_recipe(rep: RepType | str) -> Recipe:
    """Single-type recipe, e.g. all-E4M3 or BF16-only fake quantization."""
    rep = RepType(rep.upper() if isinstance(rep, str) else rep)
    return Recipe(rep.value.lower(), (rep,), ())


RECIPES = ("tensor", "three-way", "two-way", "e4m3", "e5m2", "bf16")


def get_recipe(name: str, threshold: float = DEFAULT_THRESHOLD) -> Recipe:
    name = name.lower()
    if name == "tensor":
        return tensor_recipe(threshold)
    if name == "three-way":
        return three_way_recipe()
    if name == "two-way":
        return two_way_recipe()
    if name in ("e4m3", "e5m2", "bf16"):
        return static_recipe(name)
    raise ValueError(f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}")


@dataclass
class FormatPass:
    """One scale-round-measure sweep of a tensor onto an FP8 format."""

    fmt: FloatFormat
    scales: np.ndarray  # (nbr, nbc) float32
    meta: Any  # GamScale | E8M0 codes | None
    rounded: np.ndarray  # scaled values on the format grid
    err_sum: np.ndarray  # (nbr, nbc) float64
    nnz: np.ndarray  # (nbr, nbc) int64

    def global_error(self) -> float:
        n = int(self.nnz.sum())
        if n == 0:
            return 0.0
        # sequential sum in block order
        return float(np.cumsum(self.err_sum.ravel())[-1]) / n

    def block_mean_errors(self) -> np.ndarray:
        out = np.zeros(self.err_sum.shape)
        np.divide(self.err_sum, self.nnz, out=out, where=self.nnz > 0)
        return out


def quantize_pass(
    t: TensorF32, partition: PartitionSpec, strategy: ScalingStrategy | str, fmt: FloatFormat
) -> FormatPass:
    amax = t.grid_stats(partition)[0]
    scales, meta = block_scales(amax, strategy, fmt.max_finite)
    tr, tc = partition.tile_shape(t.rows, t.cols)
    rounded, err_sum, nnz = kernels.fake_quant_grid(
        t.values, tr, tc, scales, fmt.mantissa_bits, fmt.min_exp, fmt.max_finite
    )
    return FormatPass(fmt, scales, meta, rounded, err_sum, nnz)


def make_quantize_fn(fmt: FloatFormat, scale: float) -> Callable[[np.ndarray], np.ndarray]:
    """Q(x): scale, round onto ``fmt``, descale, all in float32."""
    s = np.float32(scale)

    def q(x):
        x = np.asarray(x, dtype=np.float32)
        return formats.round_to_format(x * s, fmt) / s

    return q


def rel_error_sum(t, b: BlockView, quantize_fn) -> tuple[float, int]:
    """Sum of ``|x - Q(x)| / |x|`` over nonzero elements (row-major order)."""
    t = as_tensor(t)
    x = t.block(b).reshape(-1)
    x = x[x != 0]
    if x.size == 0:
        return 0.0, 0
    x64 = x.astype(np.float64)
    q = np.asarray(quantize_fn(x), dtype=np.float32).astype(np.float64)
    return float(np.cumsum(np.abs(x64 - q) / np.abs(x64))[-1]), int(x.size)


def tensor_level_decide(
    t,
    partition: PartitionSpec | None = None,
    strategy: ScalingStrategy | str = ScalingStrategy.GAM,
    th: float = DEFAULT_THRESHOLD,
) -> tuple[RepType, float]:
    """E4M3 iff the element-mean relative error over the tensor is below ``th``.

    The partition only decides how scales are computed; the decision is
    global. A tensor with no nonzero elements has error 0 and stays E4M3.
    """
    t = as_tensor(t)
    p = quantize_pass(t, partition or PartitionSpec.block(128), strategy, formats.E4M3)
    err = p.global_error()
    if int(p.nnz.sum()) == 0:
        return RepType.E4M3, 0.0
    return (RepType.E4M3 if err < th else RepType.BF16), err


def subtensor_metric_m1(t, b: BlockView, scale_e4m3: float, scale_e5m2: float) -> bool:
    """True iff E4M3 gives a strictly lower summed relative error than E5M2."""
    e4, _ = rel_error_sum(t, b, make_quantize_fn(formats.E4M3, scale_e4m3))
    e5, _ = rel_error_sum(t, b, make_quantize_fn(formats.E5M2, scale_e5m2))
    return e4 < e5


def range_fits_e5m2(amax, minabs_nonzero):
    """``amax / min_nonzero < 57344 / 2^-14``; all-zero blocks pass."""
    amax = np.asarray(amax, dtype=np.float64)
    minabs = np.asarray(minabs_nonzero, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isfinite(minabs) & (minabs > 0), amax / minabs, 0.0)
    return ratio < E5M2_RANGE_LIMIT


def subtensor_metric_m2(t, b: BlockView) -> bool:
    a = np.abs(as_tensor(t).block(b))
    nz = a[a > 0]
    if nz.size == 0:
        return True
    return bool(range_fits_e5m2(a.max(), nz.min()))


@dataclass
class QuantizedTensor:
    """Per-block type tags, on-grid payload and scale metadata."""

    shape: tuple[int, int]
    partition: PartitionSpec
    recipe: Recipe
    strategy: ScalingStrategy
    tags: np.ndarray  # (nbr, nbc) uint8 index into TAG_ORDER
    grid_values: np.ndarray  # scaled on-grid values (FP8) or BF16-rounded values
    scales: np.ndarray  # (nbr, nbc) float32; 1.0 for BF16 blocks
    scale_meta: dict[str, Any] = field(default_factory=dict)
    global_error: float | None = None
    block_errors: dict[str, np.ndarray] = field(default_factory=dict)
    metric_results: list[np.ndarray] = field(default_factory=list)

    @property
    def tile(self) -> tuple[int, int]:
        return self.partition.tile_shape(*self.shape)

    @property
    def gam(self) -> GamScale | None:
        meta = self.scale_meta.get("E4M3")
        return meta if isinstance(meta, GamScale) else None

    @property
    def decisions(self) -> dict[int, RepType]:
        return {i: TAG_ORDER[c] for i, c in enumerate(self.tags.ravel())}

    def tag_of(self, block_id: int) -> RepType:
        return TAG_ORDER[int(self.tags.ravel()[block_id])]

    def _expand(self, grid: np.ndarray) -> np.ndarray:
        tr, tc = self.tile
        rows, cols = self.shape
        return np.repeat(np.repeat(grid, tr, axis=0), tc, axis=1)[:rows, :cols]

    @property
    def T(self) -> QuantizedTensor:
        """Transposed view: same payload, partition mirrored."""
        part = self.partition
        if part.kind.value == "block":
            part = PartitionSpec.block(part.block_cols, part.block_rows)
        elif part.kind.value in ("channel", "subchannel"):
            part = part.with_axis("col" if part.axis.value == "row" else "row")
        return QuantizedTensor(
            shape=(self.shape[1], self.shape[0]),
            partition=part,
            recipe=self.recipe,
            strategy=self.strategy,
            tags=self.tags.T.copy(),
            grid_values=self.grid_values.T.copy(),
            scales=self.scales.T.copy(),
            scale_meta=self.scale_meta,
            global_error=self.global_error,
            block_errors={k: v.T.copy() for k, v in self.block_errors.items()},
        )

    def element_tags(self) -> np.ndarray:
        return self._expand(self.tags)

    def codes(self) -> np.ndarray:
        """Encoded payload: FP8 codes or BF16 bit patterns, as uint16."""
        el = self.element_tags()
        out = np.zeros(self.shape, dtype=np.uint16)
        for rep in TAG_ORDER:
            mask = el == TAG_CODE[rep]
            if mask.any():
                out[mask] = formats.encode_array(self.grid_values[mask], rep.fmt)
        return out

    def dequantize(self) -> np.ndarray:
        """Decode the payload and descale: the emulated working-precision tensor."""
        codes = self.codes()
        el = self.element_tags()
        s = self._expand(self.scales)
        out = np.empty(self.shape, dtype=np.float32)
        for rep in TAG_ORDER:
            mask = el == TAG_CODE[rep]
            if mask.any():
                vals = formats.decode_array(codes[mask], rep.fmt)
                out[mask] = vals if rep is RepType.BF16 else vals / s[mask]
        return out

    def fake_values(self) -> np.ndarray:
        """Same result as :meth:`dequantize` without materializing codes."""
        return (self.grid_values / self._expand(self.scales)).astype(np.float32)

    def fallback_fraction(self) -> float:
        return float((self.tags == TAG_CODE[RepType.BF16]).mean())

    def decision_record(self, tensor_key=None, step: int | None = None,
                        per_block: bool = False) -> dict:
        tags = [TAG_ORDER[c].value for c in self.tags.ravel()]
        rec = {
            "tensor_key": None if tensor_key is None else str(tensor_key),
            "step": step,
            "partition": str(self.partition),
            "recipe": self.recipe.name,
            "strategy": self.strategy.value,
            "decision": tags[0] if self.recipe.granularity is Granularity.TENSOR else tags,
            "global_rel_error": self.global_error,
        }
        if per_block and "E4M3" in self.block_errors:
            rec["per_block_errors"] = [float(e) for e in self.block_errors["E4M3"].ravel()]
        return rec


def _select(metric_results: list[np.ndarray], k: int, grid: tuple[int, int]) -> np.ndarray:
    # first passing metric wins; index k-1 is the unconditional fallback
    choice = np.full(grid, k - 1, dtype=np.intp)
    for i in reversed(range(k - 1)):
        choice = np.where(metric_results[i], i, choice)
    return choice


def mor_quantize(
    t,
    recipe: Recipe | None = None,
    partition: PartitionSpec | None = None,
    strategy: ScalingStrategy | str = ScalingStrategy.GAM,
) -> QuantizedTensor:
    t = as_tensor(t)
    recipe = recipe or tensor_recipe()
    partition = partition or PartitionSpec.block(128)
    strategy = ScalingStrategy(strategy)
    grid = partition.grid_shape(t.rows, t.cols)

    passes: dict[str, FormatPass] = {}

    def get(fmt: FloatFormat) -> FormatPass:
        if fmt.name not in passes:
            passes[fmt.name] = quantize_pass(t, partition, strategy, fmt)
        return passes[fmt.name]

    global_error = None
    results = []
    for metric in recipe.metrics:
        if metric is Metric.REL_ERROR:
            p = get(formats.E4M3)
            if recipe.granularity is Granularity.TENSOR:
                global_error = p.global_error()
                ok = global_error < recipe.threshold or int(p.nnz.sum()) == 0
                results.append(np.full(grid, ok))
            else:
                results.append((p.block_mean_errors() < recipe.threshold) | (p.nnz == 0))
        elif metric is Metric.E4M3_BEATS_E5M2:
            results.append(get(formats.E4M3).err_sum < get(formats.E5M2).err_sum)
        elif metric is Metric.E5M2_RANGE:
            _, minabs, _ = t.grid_stats(partition)
            results.append(range_fits_e5m2(t.grid_stats(partition)[0], minabs))
    choice = _select(results, len(recipe.types), grid)

    tags = np.empty(grid, dtype=np.uint8)
    for i, rep in enumerate(recipe.types):
        tags[choice == i] = TAG_CODE[rep]

    tr, tc = partition.tile_shape(t.rows, t.cols)
    el_tags = np.repeat(np.repeat(tags, tr, axis=0), tc, axis=1)[: t.rows, : t.cols]
    grid_values = np.empty(t.shape, dtype=np.float32)
    scales = np.ones(grid, dtype=np.float32)
    for rep in recipe.types:
        block_mask = tags == TAG_CODE[rep]
        if not block_mask.any():
            continue
        mask = el_tags == TAG_CODE[rep]
        if rep is RepType.BF16:
            grid_values[mask] = formats.round_to_format(t.values[mask], formats.BF16)
        else:
            p = get(rep.fmt)
            grid_values[mask] = p.rounded[mask]
            scales[block_mask] = p.scales[block_mask]

    if global_error is None and formats.E4M3.name in passes:
        global_error = passes["E4M3"].global_error()
    return QuantizedTensor(
        shape=t.shape,
        partition=partition,
        recipe=recipe,
        strategy=strategy,
        tags=tags,
        grid_values=grid_values,
        scales=scales,
        scale_meta={name: p.meta for name, p in passes.items()},
        global_error=global_error,
        block_errors={name: p.block_mean_errors() for name, p in passes.items()},
        metric_results=results,
    )

