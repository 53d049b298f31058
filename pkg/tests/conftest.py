import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from photodoodle.model import ModelConfig, init_params  # noqa: E402
from photodoodle.positional import TokenSeq, grid_positions  # noqa: E402


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=8, heads=2, depth=1, mlp_ratio=2, vocab_size=6, patch=2, channels=1, max_text_len=2)


@pytest.fixture
def small_cfg():
    return ModelConfig(d=16, heads=2, depth=2, mlp_ratio=2, vocab_size=10, patch=2, channels=3, max_text_len=4)


def random_inputs(cfg, grid=(2, 2), batch=None, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    n = grid[0] * grid[1]
    pos = grid_positions(*grid)
    z = TokenSeq(rng.standard_normal(lead + (n, cfg.token_dim)).astype(dtype), pos, "latent")
    c = TokenSeq(rng.standard_normal(lead + (n, cfg.token_dim)).astype(dtype), pos, "image")
    ids = rng.integers(0, cfg.vocab_size, size=lead + (cfg.max_text_len,))
    return z, c, ids


def random_params(cfg, seed=0, dtype="f64"):
    return init_params(cfg, seed=seed, dtype=dtype, zero_gates=False)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
