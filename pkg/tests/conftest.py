"""Shared fixtures: tiny configs for math checks, a pretrained small model
for engine tests, and a memorization model for teacher-quality tests."""

import numpy as np
import pytest

from earlyexit.config import bundled_corpus_path
from earlyexit.model import Backbone, ModelConfig, pretrain
from earlyexit.rng import Rng

MEMO_TEXT = (
    b"The quick brown fox jumps over a lazy dog. Pack my box with five "
    b"dozen liquor jugs. How vexingly daft zebras leap! Sphinx of "
    b"black quartz, judge my vow. Two driven jocks help fax my big quiz. "
    b"Five boxing wizards sprint past the quiet dock at noon, and rest."
)[:256]
assert len(MEMO_TEXT) == 256


@pytest.fixture(scope="session")
def corpus() -> bytes:
    with open(bundled_corpus_path(), "rb") as fh:
        return fh.read()


@pytest.fixture()
def tiny_config() -> ModelConfig:
    return ModelConfig(vocab_size=11, d_model=8, n_layers=3, n_attn_heads=2,
                       d_ff=16, max_seq_len=8, exit_taps=(1, 2), seed=3)


@pytest.fixture()
def tiny_model_f64(tiny_config) -> Backbone:
    return Backbone.init_random(tiny_config, Rng(3), dtype=np.float64)


@pytest.fixture(scope="session")
def small_model(corpus) -> Backbone:
    """A lightly pretrained small backbone: fast, deterministic, good enough
    for engine mechanics (not for quality assertions)."""
    cfg = ModelConfig(vocab_size=256, d_model=64, n_layers=4, n_attn_heads=4,
                      d_ff=128, max_seq_len=96, exit_taps=(1, 2, 3), seed=11)
    model, losses = pretrain(corpus, cfg, steps=120, lr=2e-3, batch=4, window=48)
    assert losses[-1] < losses[0]
    return model


@pytest.fixture(scope="session")
def memo_model() -> Backbone:
    """Tiny backbone overfit onto a fixed 256-byte corpus."""
    cfg = ModelConfig(vocab_size=256, d_model=64, n_layers=4, n_attn_heads=4,
                      d_ff=256, max_seq_len=64, exit_taps=(1, 2, 3), seed=42)
    model, losses = pretrain(MEMO_TEXT, cfg, steps=600, lr=2e-3, batch=8, window=48)
    assert losses[-1] < 0.5
    return model
