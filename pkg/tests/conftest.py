import sys

import numpy as np
import pytest

from plab.models import ModelConfig, build_model

TINY = dict(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=64, max_seq=12)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def random_corpus(n, seed=0, vocab=60, lo=4, hi=11):
    rng = np.random.default_rng(seed)
    return [list(map(int, rng.integers(0, vocab, size=rng.integers(lo, hi + 1)))) for _ in range(n)]


@pytest.fixture
def causal_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def encoder_model():
    return build_model(tiny_config(attention="bidirectional"), seed=0)


@pytest.fixture
def corpus():
    return random_corpus(64)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)
