import sys

import numpy as np
import pytest
from hypothesis import settings

from gsvr.deform import GopModel, TriPlane
from gsvr.gaussian import DeformedGaussians, Gaussians

settings.register_profile("gsvr", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("gsvr")


def random_deformed(rng, n, width=16, height=16, dtype=np.float64, scale=(1.0, 4.0)):
    return DeformedGaussians(
        mu=rng.uniform(-0.9, 0.9, (n, 2)).astype(dtype),
        scale=rng.uniform(*scale, (n, 2)).astype(dtype),
        theta=rng.uniform(-np.pi, np.pi, n).astype(dtype),
        color=rng.normal(0.0, 0.5, (n, 3)).astype(dtype),
    )


def random_gop(rng, n=10, frames=(0, 7), res=(4, 4, 3), dtype=np.float64, motion="hybrid"):
    """Random model with planes kept near the multiplicative identity so scales stay positive."""
    nx, ny, nt = res
    g = Gaussians(
        mu=rng.uniform(-0.9, 0.9, (n, 2)),
        s_raw=rng.uniform(np.log(1.5), np.log(4.0), (n, 2)),
        theta_raw=rng.normal(0.0, 1.0, n),
        color=rng.normal(0.0, 0.5, (n, 3)),
        poly=rng.normal(0.0, 0.1, (n, 3, 2)),
        alpha_raw=rng.normal(0.0, 1.0, n),
    ).astype(dtype)
    tp = TriPlane(rng.uniform(-0.2, 0.2, (8, nx, ny)), rng.uniform(0.8, 1.2, (8, nx, nt)),
                  rng.uniform(0.8, 1.2, (8, ny, nt))).astype(dtype)
    return GopModel(g, tp, frames, motion)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion that ran."""
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")
                and hasattr(m, "summary_lines")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
