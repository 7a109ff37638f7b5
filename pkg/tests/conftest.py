import sys
from pathlib import Path

import pytest

from polylm.architecture import ModelConfig, init_weights
from polylm.datapipe import SAMPLE_SENTENCES
from polylm.tokenizer import bpe_train

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tokenizer():
    corpus = list(SAMPLE_SENTENCES.values()) * 3 + ["Question: what is 12 + 30? Answer: 42"]
    return bpe_train(corpus, 320, seed=0)


@pytest.fixture(scope="session")
def small_config(tokenizer):
    return ModelConfig(
        vocab_size=tokenizer.vocab_size, d_model=32, n_layers=2, d_ffn=48, n_heads=4, n_kv_heads=2, d_head=8, max_seq_len=256
    )


@pytest.fixture
def small_model(small_config):
    return small_config, init_weights(small_config, seed=3, std=0.2)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, one line per criterion."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
