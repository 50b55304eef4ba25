"""Desk-scale workloads: synthetic tensor streams and a tiny MLP trainer.

Streams reproduce two effects seen in real training: outlier channels, which
favor per-channel scaling, and a dynamic range that widens over steps, which
eventually pushes the E4M3 error past the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from morq.fakequant_gemm import PrecisionCost, fake_quantize, gemm_cost
from morq.gam import ScalingStrategy
from morq.mor import Recipe, RepType, get_recipe, mor_quantize
from morq.stats import (
    DEFAULT_RESET_PERIOD,
    MODULES,
    Direction,
    Pass,
    StatsState,
    TensorKey,
    export_heatmap,
    fallback_percentage,
)
from morq.tensor import Axis, PartitionKind, PartitionSpec, TensorF32


@dataclass(frozen=True)
class TensorStreamSpec:
    rows: int = 128
    cols: int = 128
    steps: int = 100
    distribution: str = "gaussian"  # "gaussian" | "lognormal"
    sigma: float = 1.0
    mu: float = 0.0
    outlier_channel_fraction: float = 0.0
    outlier_magnitude: float = 1.0
    drift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "lognormal"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not 0 <= self.outlier_channel_fraction <= 1:
            raise ValueError("outlier_channel_fraction must lie in [0, 1]")
        if self.drift < 1:
            raise ValueError("drift must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TensorStreamSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown stream keys: {sorted(unknown)}")
        return cls(**d)


def outlier_channels(spec: TensorStreamSpec) -> np.ndarray:
    """Fixed row indices scaled by ``outlier_magnitude`` at every step."""
    n = int(round(spec.outlier_channel_fraction * spec.rows))
    rng = np.random.default_rng([spec.seed, 0xC4A7])
    return np.sort(rng.choice(spec.rows, size=n, replace=False))


def stream_tensor(spec: TensorStreamSpec, step: int, channels: np.ndarray | None = None
                  ) -> TensorF32:
    """Tensor at ``step``; independent of any other step's draw.

    Drift multiplies each element by ``drift ** (step * |x| / amax)``: the
    largest element grows by exactly ``drift ** step`` while values near zero
    stay put, so the dynamic range widens over time.
    """
    rng = np.random.default_rng([spec.seed, step])
    shape = (spec.rows, spec.cols)
    if spec.distribution == "gaussian":
        x = spec.sigma * rng.standard_normal(shape)
    else:
        x = rng.choice([-1.0, 1.0], size=shape) * rng.lognormal(spec.mu, spec.sigma, shape)
    if channels is None:
        channels = outlier_channels(spec)
    if channels.size:
        x[channels] *= spec.outlier_magnitude
    if spec.drift != 1 and step:
        a = np.abs(x)
        amax = a.max()
        if amax > 0:
            x = x * np.exp(step * math.log(spec.drift) * (a / amax))
    return TensorF32(x.astype(np.float32))


def generate_stream(spec: TensorStreamSpec) -> Iterator[TensorF32]:
    channels = outlier_channels(spec)
    for step in range(spec.steps):
        yield stream_tensor(spec, step, channels)


def run_replay(
    stream,
    recipe: Recipe,
    partition: PartitionSpec,
    strategy: ScalingStrategy | str = ScalingStrategy.GAM,
    key=None,
    reset_period: int = DEFAULT_RESET_PERIOD,
    state: StatsState | None = None,
    per_block: bool = False,
) -> tuple[StatsState, list[dict]]:
    """Run MoR over a stream, one observation per step.

    Items may be tensors (keyed by ``key``) or ``(key, step, tensor)`` triples.
    """
    state = state or StatsState(reset_period)
    log = []
    for i, item in enumerate(stream):
        if isinstance(item, tuple):
            k, step, t = item
        else:
            k, step, t = key, i, item
        qt = mor_quantize(t, recipe, partition, strategy)
        decisions = [d.value for d in qt.decisions.values()]
        err = qt.global_error if qt.global_error is not None else 0.0
        state.record(k, step, err, decisions[0] if len(decisions) == 1 else decisions)
        log.append(qt.decision_record(k, step, per_block=per_block))
    return state, log


# --- toy trainer -------------------------------------------------------------


@dataclass
class ToyModelConfig:
    sizes: Sequence[int] = (32, 64, 64, 64, 16)
    steps: int = 300
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    recipe: str = "baseline"
    partition: str = "block:128x128"
    strategy: str = "gam"
    threshold: float = 0.045
    quantize_roles: Sequence[str] = ("input", "weight", "grad")
    dtype: str = "float32"
    teacher_hidden: int = 32
    noise: float = 0.1
    eval_size: int = 1024
    reset_period: int = DEFAULT_RESET_PERIOD

    @classmethod
    def from_dict(cls, d: dict) -> ToyModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["quantize_roles"] = list(self.quantize_roles)
        return d


@dataclass
class TrainReport:
    losses: list[float]
    final_loss: float
    eval_loss: float
    diverged_at: int | None
    fallback: dict
    histogram: dict
    cost: dict
    config: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


class _Teacher:
    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.w1 = rng.standard_normal((n_hidden, n_in)) / math.sqrt(n_in)
        self.w2 = rng.standard_normal((n_out, n_hidden)) / math.sqrt(n_hidden)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1.T * 2.0) @ self.w2.T


def init_params(sizes: Sequence[int], rng: np.random.Generator, dtype) -> list[tuple]:
    params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
        params.append((w.astype(dtype), np.zeros(n_out, dtype=dtype)))
    return params


class _Quantizer:
    """Fake-quantizes GEMM operands and records their statistics."""

    def __init__(self, cfg: ToyModelConfig, state: StatsState):
        self.recipe = None if cfg.recipe == "baseline" else get_recipe(cfg.recipe, cfg.threshold)
        self.partition = PartitionSpec.parse(cfg.partition)
        self.strategy = ScalingStrategy(cfg.strategy)
        self.roles = set(cfg.quantize_roles)
        self.state = state
        self.cost = PrecisionCost()
        self.step = 0

    @property
    def active(self) -> bool:
        return self.recipe is not None

    def _q(self, x: np.ndarray, layer: int, role: str, axis: Axis, pass_: Pass):
        channel = self.partition.kind in (PartitionKind.CHANNEL, PartitionKind.SUBCHANNEL)
        part = self.partition.with_axis(axis)
        out, qt = fake_quantize(x, self.recipe, part, self.strategy)
        key = TensorKey(
            layer // len(MODULES),
            MODULES[layer % len(MODULES)],
            role,
            Direction(axis.value) if channel else Direction.NA,
            pass_,
        )
        err = qt.global_error if qt.global_error is not None else 0.0
        tags = [d.value for d in qt.decisions.values()]
        self.state.record(key, self.step, err, tags[0] if len(tags) == 1 else tags)
        return out.astype(x.dtype), qt

    def matmul(self, a, a_role, a_axis, b, b_role, b_axis, layer, pass_, transpose=(False, False)):
        """``op(a) @ op(b)`` with each operand quantized along its contraction axis.

        ``a_axis``/``b_axis`` are the channel axes of the untransposed arrays.
        """
        if not self.active:
            a2 = a.T if transpose[0] else a
            b2 = b.T if transpose[1] else b
            return a2 @ b2
        if a_role in self.roles:
            a, qa = self._q(a, layer, a_role, a_axis, pass_)
        else:
            qa = mor_quantize(a, get_recipe("bf16"), self.partition.with_axis(a_axis))
        if b_role in self.roles:
            b, qb = self._q(b, layer, b_role, b_axis, pass_)
        else:
            qb = mor_quantize(b, get_recipe("bf16"), self.partition.with_axis(b_axis))
        if transpose[0]:
            a, qa = a.T, qa.T
        if transpose[1]:
            b, qb = b.T, qb.T
        self.cost = self.cost + gemm_cost(qa, qb)
        return a @ b


def forward_backward(params, x, y, quant: _Quantizer | None = None, with_grads: bool = True):
    """MSE loss ``0.5 * mean((f(x) - y)^2)`` and its gradients (tanh MLP).

    Linear layer ``l`` computes ``h @ W.T + b``. Every GEMM, forward and
    backward, routes through ``quant`` when it is active.
    """
    acts = [x]
    pre = []
    h = x
    n_layers = len(params)
    for l, (w, b) in enumerate(params):
        if quant is not None and quant.active:
            z = quant.matmul(h, "input", Axis.ROW, w, "weight", Axis.ROW, l, Pass.FORWARD,
                             transpose=(False, True)) + b
        else:
            z = h @ w.T + b
        pre.append(z)
        h = np.tanh(z) if l < n_layers - 1 else z
        acts.append(h)
    diff = h - y
    loss = 0.5 * float(np.mean(diff.astype(np.float64) ** 2))
    if not with_grads:
        return loss, None
    dz = (diff / diff.size).astype(h.dtype)
    grads = [None] * n_layers
    for l in reversed(range(n_layers)):
        w, b = params[l]
        a_in = acts[l]
        if quant is not None and quant.active:
            dw = quant.matmul(dz, "grad", Axis.COL, a_in, "input", Axis.COL, l, Pass.BACKWARD,
                              transpose=(True, False))
        else:
            dw = dz.T @ a_in
        db = dz.sum(axis=0)
        grads[l] = (dw, db)
        if l:
            if quant is not None and quant.active:
                da = quant.matmul(dz, "grad", Axis.ROW, w, "weight", Axis.COL, l, Pass.BACKWARD)
            else:
                da = dz @ w
            dz = da * (1 - acts[l] ** 2)
    return loss, grads


def _data(cfg: ToyModelConfig, dtype):
    rng = np.random.default_rng([cfg.seed, 1])
    teacher = _Teacher(cfg.sizes[0], cfg.teacher_hidden, cfg.sizes[-1], rng)

    def batch(step: int, n: int, stream: int = 2):
        r = np.random.default_rng([cfg.seed, stream, step])
        x = r.standard_normal((n, cfg.sizes[0]))
        y = teacher(x) + cfg.noise * r.standard_normal((n, cfg.sizes[-1]))
        return x.astype(dtype), y.astype(dtype)

    return batch


def train_toy(cfg: ToyModelConfig) -> TrainReport:
    dtype = np.dtype(cfg.dtype)
    params = init_params(cfg.sizes, np.random.default_rng([cfg.seed, 3]), dtype)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    batch = _data(cfg, dtype)
    state = StatsState(cfg.reset_period)
    quant = _Quantizer(cfg, state)
    losses: list[float] = []
    diverged_at = None
    for step in range(cfg.steps):
        quant.step = step
        x, y = batch(step, cfg.batch)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = forward_backward(params, x, y, quant)
        except ValueError:  # non-finite operand reached the quantizer
            loss, grads = math.nan, None
        if not math.isfinite(loss) or grads is None:
            diverged_at = step
            break
        losses.append(loss)
        new_params, new_velocity = [], []
        for (w, b), (vw, vb), (gw, gb) in zip(params, velocity, grads):
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            new_params.append(((w - cfg.lr * vw).astype(dtype), (b - cfg.lr * vb).astype(dtype)))
            new_velocity.append((vw, vb))
        params, velocity = new_params, new_velocity

    ex, ey = batch(0, cfg.eval_size, stream=4)
    with np.errstate(over="ignore", invalid="ignore"):
        eval_loss = forward_backward(params, ex, ey, None, with_grads=False)[0]
    tail = losses[-max(1, len(losses) // 10):] if losses else [math.nan]
    histogram = {}
    if state.records:
        for p in Pass:
            heat = export_heatmap(state, "tensor", filter=lambda k, p=p: k.pass_ is p)
            histogram[p.value] = json.loads(heat.to_json())
    return TrainReport(
        losses=losses,
        final_loss=float(np.mean(tail)),
        eval_loss=eval_loss,
        diverged_at=diverged_at,
        fallback={
            "overall": fallback_percentage(state),
            "by_role": {
                r: fallback_percentage(state, lambda k, r=r: k.role == r)
                for r in ("input", "weight", "grad")
            },
        },
        histogram=histogram,
        cost=quant.cost.to_dict(),
        config=cfg.to_dict(),
    )


def gradient_check(sizes: Sequence[int] = (5, 7, 6, 3), seed: int = 0, batch: int = 4,
                   eps: float = 1e-6, samples: int = 20) -> float:
    """Largest relative gap between analytic and central-difference gradients
    (float64, quantization off) over randomly sampled parameters."""
    rng = np.random.default_rng(seed)
    params = init_params(sizes, rng, np.float64)
    params = [(w, rng.standard_normal(b.shape) * 0.1) for w, b in params]
    x = rng.standard_normal((batch, sizes[0]))
    y = rng.standard_normal((batch, sizes[-1]))
    _, grads = forward_backward(params, x, y)
    worst = 0.0
    for _ in range(samples):
        l = int(rng.integers(len(params)))
        which = int(rng.integers(2))
        arr = params[l][which]
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = forward_backward(params, x, y, with_grads=False)[0]
        arr[idx] = orig - eps
        lm = forward_backward(params, x, y, with_grads=False)[0]
        arr[idx] = orig
        fd = (lp - lm) / (2 * eps)
        an = grads[l][which][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst
