"""Early-exit engine: exit rule, cache fills, accounting, monotonicity."""

import math

import numpy as np
import pytest

from earlyexit.calibration import (CalibrationRecord, ConfidenceMetric,
                                   ThresholdTable, build_threshold_table,
                                   collect_calibration)
from earlyexit.decoding import AttentionCache, FillMode, encode_text, prefill
from earlyexit.errors import CapacityError, ConfigurationError
from earlyexit.heads import InitMode, init_heads
from earlyexit.rng import Rng
from earlyexit.runtime import (agreement_eval, backbone_greedy, exit_depths,
                               generate, step, teacher_forced_decisions)

RNG = np.random.default_rng(606)


def make_table(taus, metric=ConfidenceMetric.BREAKING_TIES, epsilon=0.9):
    return ThresholdTable(epsilon=epsilon, metric=metric, tau=list(taus),
                          calib_size=0)


@pytest.fixture(scope="module")
def bank(small_model):
    bank = init_heads(small_model, InitMode.SCRATCH, Rng(21))
    # crude but real: one quick pass so heads are better than random
    from earlyexit.training import TrainSettings, train_heads

    settings = TrainSettings(lam=0.3, lr=2e-3, steps=120, gen_len=24, seed=3,
                             refresh_every=60, context_window=64,
                             batch_prompts=("The river is", "In Python, a list",
                                            "My name is"))
    train_heads(small_model, bank, settings)
    return bank


@pytest.fixture(scope="module")
def calibrated_table(small_model, bank):
    records = collect_calibration(small_model, bank,
                                  ["The garden", "a function", "Welcome to"],
                                  32, "breaking-ties")
    return build_threshold_table(records, 0.7, "breaking-ties",
                                 len(small_model.config.exit_taps))


class TestStep:
    def test_disabled_exits_reach_final(self, small_model, bank):
        table = make_table([math.inf] * 3)
        cache = AttentionCache(small_model.config)
        dec = step(small_model, bank, table, cache, 65)
        assert dec.exited_at is None
        assert dec.blocks_executed == small_model.config.n_layers
        assert len(dec.confidence_values) == 3
        assert cache.length == 1

    def test_forced_first_exit(self, small_model, bank):
        table = make_table([-math.inf] * 3)
        cache = AttentionCache(small_model.config)
        dec = step(small_model, bank, table, cache, 65)
        assert dec.exited_at == 0
        assert dec.tap_block == small_model.config.exit_taps[0]
        assert dec.blocks_executed == small_model.config.exit_taps[0]
        assert len(dec.confidence_values) == 1
        # every layer still holds exactly one kv row
        for layer in range(small_model.config.n_layers):
            assert cache.length == 1

    def test_first_clearing_head_rule_replay(self, small_model, bank,
                                             calibrated_table):
        trace = generate(small_model, bank, calibrated_table, "The river is",
                         24, FillMode.STATE_COPY)
        for dec in trace.decisions:
            expected = None
            for ki, c in enumerate(dec.confidence_values):
                if c >= calibrated_table.tau[ki]:
                    expected = ki
                    break
            assert dec.exited_at == expected
            if dec.exited_at is not None:
                assert len(dec.confidence_values) == dec.exited_at + 1

    def test_table_size_mismatch(self, small_model, bank):
        with pytest.raises(ConfigurationError):
            step(small_model, bank, make_table([math.inf]),
                 AttentionCache(small_model.config), 5)


class TestGenerate:
    def test_disabled_exits_bit_identical_to_backbone(self, small_model, bank):
        table = make_table([math.inf] * 3)
        for prompt in ("The library is", "My name is", "a cat"):
            trace = generate(small_model, bank, table, prompt, 20)
            reference = backbone_greedy(small_model, prompt, 20)
            assert trace.tokens == reference
            assert trace.speedup == 1.0
            assert trace.final_exits == 20
            assert trace.kv_fills == 0

    def test_trace_totals_match_instrumentation(self, small_model, bank,
                                                calibrated_table):
        for mode in FillMode:
            toks = encode_text("The mountain")
            cache = AttentionCache(small_model.config, mode)
            prefill(small_model, cache, toks[:-1])
            before = cache.blocks_executed
            cur = int(toks[-1])
            decisions = []
            for _ in range(16):
                dec = step(small_model, bank, calibrated_table, cache, cur)
                decisions.append(dec)
                cur = dec.token
            assert sum(d.blocks_executed for d in decisions) == \
                cache.blocks_executed - before
            if mode is FillMode.EXACT:
                assert all(d.blocks_executed == small_model.config.n_layers
                           for d in decisions)

    def test_exit_fractions_partition_tokens(self, small_model, bank,
                                             calibrated_table):
        trace = generate(small_model, bank, calibrated_table, "The harbor", 30)
        assert sum(trace.per_head_exits) + trace.final_exits == 30
        assert trace.speedup >= 1.0
        d = trace.to_json_dict(extra="x")
        assert d["totals"]["tokens"] == 30
        assert d["extra"] == "x"

    def test_capacity_error(self, small_model, bank):
        table = make_table([math.inf] * 3)
        prompt = "y" * (small_model.config.max_seq_len - 4)
        with pytest.raises(CapacityError):
            generate(small_model, bank, table, prompt, 10)

    def test_first_token_identical_across_fill_modes(self, small_model, bank,
                                                     calibrated_table):
        a = generate(small_model, bank, calibrated_table, "The village", 1,
                     FillMode.STATE_COPY)
        b = generate(small_model, bank, calibrated_table, "The village", 1,
                     FillMode.EXACT)
        assert a.tokens == b.tokens
        assert a.decisions[0].exited_at == b.decisions[0].exited_at
        assert a.decisions[0].confidence_values == b.decisions[0].confidence_values


class TestCacheShape:
    @pytest.mark.parametrize("mode", list(FillMode))
    def test_every_layer_holds_every_position(self, small_model, bank, mode,
                                              calibrated_table):
        toks = encode_text("The orchard is")
        cache = AttentionCache(small_model.config, mode)
        prefill(small_model, cache, toks[:-1])
        cur = int(toks[-1])
        for _ in range(12):
            dec = step(small_model, bank, calibrated_table, cache, cur)
            cur = dec.token
        t = cache.length
        assert t == len(toks) - 1 + 12
        # rows beyond t must be untouched zeros, rows below all written
        for layer in range(small_model.config.n_layers):
            assert np.all(cache.k[layer][t:] == 0.0)
            written = np.abs(cache.k[layer][:t]).sum(axis=1)
            assert np.all(written > 0.0)


class TestTeacherForced:
    def test_exit_depth_monotone_in_epsilon_exact_fill(self, small_model, bank):
        records = collect_calibration(small_model, bank,
                                      ["The meadow", "In C, we"], 24,
                                      "breaking-ties")
        prompts = ["The workshop", "a list is"]
        refs = {p: backbone_greedy(small_model, p, 20) for p in prompts}
        grids = [0.3, 0.5, 0.7, 0.9, 0.99]
        tables = [build_threshold_table(records, e, "breaking-ties", 3)
                  for e in grids]
        for p in prompts:
            toks = encode_text(p)
            depth_rows = []
            for table in tables:
                decisions = teacher_forced_decisions(small_model, bank, table,
                                                     toks, refs[p], FillMode.EXACT)
                depth_rows.append(exit_depths(decisions,
                                              small_model.config.n_layers))
            for lo, hi in zip(depth_rows, depth_rows[1:]):
                assert all(a <= b for a, b in zip(lo, hi))

    def test_agreement_one_when_exits_disabled(self, small_model, bank):
        table = make_table([math.inf] * 3)
        report = agreement_eval(small_model, bank, table,
                                ["The kitchen", "Welcome to"], 12)
        assert report["agreement"] == 1.0
        assert report["speedup"] == 1.0
        assert report["final"]["exit_fraction"] == 1.0

    def test_agreement_report_structure(self, small_model, bank, calibrated_table):
        report = agreement_eval(small_model, bank, calibrated_table,
                                ["The lighthouse"], 15)
        assert report["tokens"] == 15
        fracs = [h["exit_fraction"] for h in report["per_head"]]
        assert abs(sum(fracs) + report["final"]["exit_fraction"] - 1.0) < 1e-9
        assert report["baseline_blocks"] == 15 * small_model.config.n_layers
        assert 0.0 <= report["agreement"] <= 1.0
