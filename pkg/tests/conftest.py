import math
import sys

import numpy as np
import pytest
from hypothesis import settings

# first calls pay numba compile time
settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def naive_loss(z, mask, tau, weights=None):
    """Double-loop reference, written without the library: one anchor at a time."""
    z = [list(map(float, row)) for row in np.asarray(z)]
    n = len(z)
    total = 0.0
    for i in range(n):
        pos = [j for j in range(n) if mask[i][j]]
        if not pos:
            continue
        logits = {a: sum(p * q for p, q in zip(z[i], z[a])) / tau for a in range(n) if a != i}
        m = max(logits.values())
        lse = m + math.log(sum(math.exp(v - m) for v in logits.values()))
        acc = 0.0
        for p in pos:
            w = 1.0 if weights is None else float(weights[i][p])
            acc += w * (logits[p] - lse)
        total += -acc / len(pos)
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
