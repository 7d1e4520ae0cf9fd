"""Exit-head construction and forward contracts."""

import math

import numpy as np
import pytest

from earlyexit.errors import DimensionError
from earlyexit.heads import (HEAD_INIT_STD, HeadBank, InitMode, head_distribution,
                             head_logits, head_logits_rows, init_heads)
from earlyexit.mathops import entropy, validate_prob_vector
from earlyexit.model import Backbone, ModelConfig, forward_full
from earlyexit.rng import Rng

RNG = np.random.default_rng(31)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(vocab_size=256, d_model=128, n_layers=4, n_attn_heads=4,
                      d_ff=256, max_seq_len=32, exit_taps=(1, 2, 3), seed=17)
    return Backbone.init_random(cfg)


class TestInit:
    def test_copied_bytes_equal_lm_head(self, model):
        bank = init_heads(model, InitMode.COPIED)
        assert len(bank) == len(model.config.exit_taps)
        assert bank.tap_indices == model.config.exit_taps
        for head in bank:
            assert head.proj.tobytes() == model.lm_head.tobytes()
            assert head.norm_gain.tobytes() == model.lnf_g.tobytes()
            assert head.norm_bias.tobytes() == model.lnf_b.tobytes()
            assert head.proj is not model.lm_head  # copies, not views

    def test_scratch_deterministic(self, model):
        b1 = init_heads(model, "scratch", Rng(99))
        b2 = init_heads(model, "scratch", Rng(99))
        assert b1.fingerprint() == b2.fingerprint()
        b3 = init_heads(model, "scratch", Rng(100))
        assert b1.fingerprint() != b3.fingerprint()

    def test_scratch_statistics(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(5))
        d, v = model.config.d_model, model.config.vocab_size
        proj = bank.heads[0].proj
        assert abs(float(proj.mean())) < 3 * HEAD_INIT_STD / math.sqrt(d * v)
        assert abs(float(proj.std()) / HEAD_INIT_STD - 1.0) < 0.05
        assert np.all(bank.heads[0].norm_gain == 1.0)
        assert np.all(bank.heads[0].norm_bias == 0.0)


class TestForward:
    def test_zero_proj_gives_uniform(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(1))
        head = bank.heads[0]
        head.proj[:] = 0.0
        hidden = RNG.standard_normal(model.config.d_model).astype(np.float32)
        z = head_logits(head, hidden)
        assert np.all(z == 0.0)
        p = head_distribution(head, hidden)
        assert np.allclose(p, 1.0 / model.config.vocab_size, atol=1e-9)

    def test_copied_head_reproduces_final_logits(self, model):
        bank = init_heads(model, InitMode.COPIED)
        toks = list(RNG.integers(0, 256, 20))
        # tap the last block's output: run with per-block recording
        tr = forward_full(model, toks, record_per_block=True)
        last_hidden = tr.per_block_hidden[-1][-1]
        z = head_logits(bank.heads[0], last_hidden)
        assert np.allclose(z, tr.final_logits, atol=1e-5)

    def test_random_instance_vs_matvec_oracle(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(2))
        head = bank.heads[1]
        hidden = RNG.standard_normal(model.config.d_model).astype(np.float32)
        got = head_logits(head, hidden)
        x = hidden.astype(np.float64)
        mu, var = x.mean(), x.var()
        xn = (x - mu) / np.sqrt(var + 1e-5) * head.norm_gain + head.norm_bias
        ref = xn @ head.proj.astype(np.float64)
        assert np.allclose(got, ref, atol=1e-5)

    def test_distribution_contract_and_argmax(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(3))
        hidden = RNG.standard_normal(model.config.d_model).astype(np.float32)
        for head in bank:
            p = head_distribution(head, hidden)
            validate_prob_vector(p)
            assert int(np.argmax(p)) == int(np.argmax(head_logits(head, hidden)))

    def test_scratch_head_near_uniform_at_init(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(4))
        v = model.config.vocab_size
        for _ in range(5):
            hidden = RNG.standard_normal(model.config.d_model).astype(np.float32)
            for head in bank:
                assert entropy(head_distribution(head, hidden)) >= 0.5 * math.log(v)

    def test_length_mismatch(self, model):
        bank = init_heads(model, InitMode.COPIED)
        with pytest.raises(DimensionError):
            head_logits(bank.heads[0], np.zeros(3, np.float32))

    def test_rows_matches_single(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(6))
        head = bank.heads[2]
        rows = RNG.standard_normal((4, model.config.d_model)).astype(np.float32)
        batched = head_logits_rows(head, rows)
        for i in range(4):
            assert np.allclose(batched[i], head_logits(head, rows[i]), atol=1e-6)


class TestIndependence:
    def test_mutating_one_head_leaves_others_identical(self, model):
        bank = init_heads(model, InitMode.SCRATCH, Rng(8))
        hidden = RNG.standard_normal(model.config.d_model).astype(np.float32)
        before = [head_logits(h, hidden).copy() for h in bank]
        bank.heads[1].proj[:] += 1.0
        bank.heads[1].norm_gain[:] = 2.0
        after = [head_logits(h, hidden) for h in bank]
        assert np.array_equal(before[0], after[0])
        assert np.array_equal(before[2], after[2])
        assert not np.array_equal(before[1], after[1])
