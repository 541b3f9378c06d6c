import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gltprune import graphio  # noqa: E402


def tiny_sbm(seed=0, blocks=(7, 7, 6), p_in=0.35, p_out=0.06, feature_dim=6, train=3, val=2):
    return graphio.generate_sbm(
        graphio.SbmConfig(
            blocks=blocks,
            p_in=p_in,
            p_out=p_out,
            feature_dim=feature_dim,
            train_per_class=train,
            val_per_class=val,
            seed=seed,
        )
    )


@pytest.fixture
def small_graph():
    return tiny_sbm(0)


@pytest.fixture(scope="session")
def sbm_graph():
    return graphio.generate_sbm(graphio.SbmConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def acceptance_line(num: int, ok: bool, detail: str) -> str:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[num] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
