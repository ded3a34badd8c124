import numpy as np
import pytest
from hypothesis import settings

from lorakit.core import RandomSource

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return RandomSource(1234, "tests")


def random_pd(rng, r, cond=10.0):
    Q = rng.child("q").orthonormal(r, r)
    w = np.geomspace(1.0, cond, r)
    return (Q * w) @ Q.T


# acceptance criteria report: number -> list of (ok, detail)
ACCEPTANCE: dict[int, list] = {}


@pytest.fixture
def record():
    def _record(n, ok, detail):
        ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for p, _ in parts)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(d for _, d in parts))
