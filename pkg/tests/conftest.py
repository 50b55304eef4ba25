from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("morq", deadline=None, max_examples=200)
settings.load_profile("morq")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bits_equal(a, b) -> bool:
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


ACCEPTANCE: list[tuple[str, str, float, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, elapsed, detail in sorted(ACCEPTANCE):
        line = f"{status}  {label}  ({elapsed:.2f}s)"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
