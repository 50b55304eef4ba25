"""Relative-error histograms, BF16 fallback counters and heatmap export.

Histograms are kept per tensor key and per step window. Windows are aligned
to ``reset_period`` (window ``w`` covers steps ``[w*P, (w+1)*P)``), which makes
shard merges exact and independent of which shard saw which step. A window is
a closed snapshot once a step at or past its last step has been recorded.
Counts stay integers; normalization happens only at export.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

import numpy as np

N_BINS = 12
BIN_WIDTH = 0.005
DEFAULT_RESET_PERIOD = 6000
# lower edges of bins 1..11, each the double nearest to 0.005*i
BIN_EDGES = tuple(i * 5 / 1000 for i in range(1, N_BINS))

MODULES = ("linear_qkv", "linear_proj", "fc1", "fc2")
ROLES = ("input", "weight", "grad")


class Direction(str, Enum):
    ROW = "row"
    COL = "col"
    NA = "na"


class Pass(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True, order=True)
class TensorKey:
    layer_index: int
    module: str
    role: str
    direction: Direction = Direction.NA
    pass_: Pass = Pass.FORWARD

    def __post_init__(self):
        if self.module not in MODULES:
            raise ValueError(f"module must be one of {MODULES}, got {self.module!r}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def label(self) -> str:
        base = f"decoder.layer.{self.layer_index}.{self.module}.{self.role}"
        return base if self.direction is Direction.NA else f"{base}.{self.direction.value}"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, label: str, pass_: Pass = Pass.FORWARD) -> TensorKey:
        m = re.fullmatch(
            r"decoder\.layer\.(\d+)\.(linear_qkv|linear_proj|fc1|fc2)\.(input|weight|grad)"
            r"(?:\.(row|col))?",
            label,
        )
        if not m:
            raise ValueError(f"not a tensor label: {label!r}")
        direction = Direction(m.group(4)) if m.group(4) else Direction.NA
        return cls(int(m.group(1)), m.group(2), m.group(3), direction, pass_)


def bin_index(rel_error: float) -> int:
    """Bin of a relative error; exact boundary values go to the higher bin."""
    if rel_error < 0:
        raise ValueError("relative error must be nonnegative")
    return bisect.bisect_right(BIN_EDGES, rel_error)


def _label(key) -> str:
    return key.label if isinstance(key, TensorKey) else str(key)


class StatsState:
    """Histogram and fallback accumulator; merge with ``+`` or :meth:`merge`."""

    def __init__(self, reset_period: int = DEFAULT_RESET_PERIOD):
        if reset_period < 1:
            raise ValueError("reset period must be >= 1")
        self.reset_period = reset_period
        # window index -> key -> counts
        self.windows: dict[int, dict[object, np.ndarray]] = defaultdict(dict)
        self.fallback_total: dict[object, int] = defaultdict(int)
        self.fallback_bf16: dict[object, int] = defaultdict(int)
        self.max_step = -1
        self.records = 0

    def record(self, key, step: int, rel_error: float, decision) -> None:
        """Count one observation; ``decision`` is a RepType, its name, or a
        sequence of per-block decisions."""
        w = step // self.reset_period
        counts = self.windows[w].get(key)
        if counts is None:
            counts = self.windows[w][key] = np.zeros(N_BINS, dtype=np.int64)
        counts[bin_index(rel_error)] += 1
        decisions = [decision] if isinstance(decision, str) else list(decision)
        self.fallback_total[key] += len(decisions)
        self.fallback_bf16[key] += sum(1 for d in decisions if str(getattr(d, "value", d)) == "BF16")
        self.max_step = max(self.max_step, step)
        self.records += 1

    @property
    def current_window(self) -> int:
        return max(self.max_step + 1, 0) // self.reset_period

    def snapshot_windows(self) -> list[int]:
        """Indices of closed windows, ascending."""
        return list(range(self.current_window))

    def window_counts(self, window: int) -> dict[object, np.ndarray]:
        return self.windows.get(window, {})

    def total_counts(self) -> int:
        return int(sum(c.sum() for win in self.windows.values() for c in win.values()))

    def merge(self, other: StatsState) -> StatsState:
        if other.reset_period != self.reset_period:
            raise ValueError("cannot merge states with different reset periods")
        out = StatsState(self.reset_period)
        for src in (self, other):
            for w, win in src.windows.items():
                for key, counts in win.items():
                    if key in out.windows[w]:
                        out.windows[w][key] = out.windows[w][key] + counts
                    else:
                        out.windows[w][key] = counts.copy()
            for key, n in src.fallback_total.items():
                out.fallback_total[key] += n
            for key, n in src.fallback_bf16.items():
                out.fallback_bf16[key] += n
        out.max_step = max(self.max_step, other.max_step)
        out.records = self.records + other.records
        return out

    __add__ = merge

    def keys(self) -> list:
        seen = {k for win in self.windows.values() for k in win}
        return sorted(seen, key=_label)


def normalize_row(counts) -> list[float]:
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return [0.0] * N_BINS
    return [int(c) / total for c in counts]


@dataclass
class Heatmap:
    row_labels: list[str]
    rows: list[list[float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + [f"bin{i}" for i in range(N_BINS)])
        for label, row in zip(self.row_labels, self.rows):
            w.writerow([label] + [repr(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        edges = [0.0, *BIN_EDGES]
        return json.dumps(
            {
                "bin_lower_edges": edges,
                "threshold_bin": bin_index(0.045),
                "rows": [{"label": l, "values": r} for l, r in zip(self.row_labels, self.rows)],
            },
            indent=1,
        )


def export_heatmap(state: StatsState, ordering: str = "tensor", key=None,
                   window: int | None = None,
                   filter: Callable[[object], bool] | None = None) -> Heatmap:
    """Row-normalized heatmap.

    ``ordering="tensor"``: one row per tensor key for ``window`` (default:
    the latest closed snapshot, else the open window). ``ordering="step"``:
    one row per window for a single ``key``, labeled by the window's first
    step. ``filter`` restricts the keys of a tensor-ordered export. Empty
    inputs produce an empty heatmap.
    """
    if ordering == "tensor":
        if window is None:
            closed = state.snapshot_windows()
            window = closed[-1] if closed else state.current_window
        win = state.window_counts(window)
        keys = sorted((k for k in win if filter is None or filter(k)), key=_label)
        return Heatmap([_label(k) for k in keys], [normalize_row(win[k]) for k in keys])
    if ordering == "step":
        if key is None:
            keys = state.keys()
            if len(keys) > 1:
                raise ValueError("step ordering needs a single tensor key")
            key = keys[0] if keys else None
        labels, rows = [], []
        for w in sorted(state.windows):
            counts = state.windows[w].get(key)
            if counts is not None:
                labels.append(str(w * state.reset_period))
                rows.append(normalize_row(counts))
        return Heatmap(labels, rows)
    raise ValueError(f"unknown ordering {ordering!r}")


def fallback_percentage(state: StatsState, filter: Callable[[object], bool] | None = None
                        ) -> float | None:
    """Fraction of BF16 decisions among matching keys; None if nothing matches."""
    keys = [k for k in state.fallback_total if filter is None or filter(k)]
    total = sum(state.fallback_total[k] for k in keys)
    if total == 0:
        return None
    return sum(state.fallback_bf16[k] for k in keys) / total


def fallback_report(state: StatsState) -> dict:
    per_key = {
        _label(k): {
            "decisions_total": state.fallback_total[k],
            "decisions_bf16": state.fallback_bf16[k],
        }
        for k in sorted(state.fallback_total, key=_label)
    }
    return {"overall": fallback_percentage(state), "per_tensor": per_key}


def merge_all(states: Iterable[StatsState]) -> StatsState:
    states = list(states)
    out = StatsState(states[0].reset_period if states else DEFAULT_RESET_PERIOD)
    for s in states:
        out = out.merge(s)
    return out
