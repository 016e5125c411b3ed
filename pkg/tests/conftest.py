import sys

import numpy as np
import pytest

from eco import (
    ClassTokenTable,
    EncoderConfig,
    SpecialTokens,
    SeededRng,
    init_random,
)

SMALL_CONFIG = EncoderConfig(
    layers=2, heads=2, model_width=16, output_dim=8, max_positions=24, vocab_size=32
)


@pytest.fixture
def small_config():
    return SMALL_CONFIG


@pytest.fixture
def small_weights(small_config):
    return init_random(small_config, SeededRng(11))


@pytest.fixture
def small_table():
    return ClassTokenTable(
        names=["ant", "bee", "cat"],
        token_ids=[[3], [4, 5], [6]],
    )


@pytest.fixture
def small_specials(small_config):
    return SpecialTokens(
        sot_id=small_config.vocab_size - 2, eot_id=small_config.vocab_size - 1
    )


@pytest.fixture
def query_batch():
    rng = SeededRng(123)
    return rng.gaussian((6, 8), 0.0, 1.0).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line-per-criterion acceptance results past output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
