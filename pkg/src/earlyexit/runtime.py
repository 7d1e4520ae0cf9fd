"""Adaptive-depth generation: run blocks until a head clears its threshold.

Per token, blocks execute in order; after each tapped block the head's
distribution is scored and, at the first head whose confidence reaches its
threshold, the token is emitted from that head and the remaining layers are
skipped (their cache rows are filled per the session's fill mode). If no
head clears, the token comes from the full-depth backbone distribution.

Speedup is reported as a block-count ratio (full-depth blocks / executed
blocks): deterministic and machine-independent, with wall-clock available
separately from the CLI as an informational figure. Prompt prefill always
runs full depth and is excluded from the accounting, which covers exactly
the per-generated-token decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibration import ThresholdTable, confidence
from .decoding import (AttentionCache, FillMode, block_step, embed_position,
                       encode_text, fill_kv_state_copy, final_logits_from_hidden,
                       full_step, generate_tokens, prefill)
from .errors import CapacityError, ConfigurationError
from .heads import HeadBank, head_distribution
from .model import Backbone


@dataclass
class ExitDecision:
    """Outcome for one generated token.

    `exited_at` is the 0-based head position, or None for a full-depth
    (final) emission. `confidence_values` holds one score per head actually
    evaluated, in tap order. `blocks_executed` counts full transformer
    blocks run for this token: the exit tap's block index under state-copy
    fills, or all n_layers under exact fills (which run the skipped blocks
    solely to populate the cache) and at final emissions.
    """

    exited_at: int | None
    confidence_values: list[float]
    token: int
    blocks_executed: int
    tap_block: int | None


@dataclass
class GenerationTrace:
    """Per-token decisions plus run totals for one generation session."""

    decisions: list[ExitDecision]
    tokens: list[int]
    per_head_exits: list[int]
    final_exits: int
    blocks_executed: int
    baseline_blocks: int
    speedup: float
    kv_fills: int
    fill_mode: FillMode

    def to_json_dict(self, **metadata) -> dict:
        d = {
            "tokens": self.tokens,
            "decisions": [
                {
                    "exited_at": dec.exited_at,
                    "tap_block": dec.tap_block,
                    "token": dec.token,
                    "blocks_executed": dec.blocks_executed,
                    "confidence_values": dec.confidence_values,
                }
                for dec in self.decisions
            ],
            "totals": {
                "tokens": len(self.tokens),
                "per_head_exits": self.per_head_exits,
                "final_exits": self.final_exits,
                "blocks_executed": self.blocks_executed,
                "baseline_blocks": self.baseline_blocks,
                "speedup": self.speedup,
                "kv_fills": self.kv_fills,
            },
            "fill_mode": self.fill_mode.value,
        }
        d.update(metadata)
        return d


def _check_setup(model: Backbone, bank: HeadBank, table: ThresholdTable) -> None:
    taps = model.config.exit_taps
    if bank.tap_indices != taps:
        raise ConfigurationError(
            f"head bank taps {bank.tap_indices} != model taps {taps}"
        )
    if len(table.tau) != len(taps):
        raise ConfigurationError(
            f"threshold table has {len(table.tau)} entries for {len(taps)} heads"
        )


def step(model: Backbone, bank: HeadBank, table: ThresholdTable,
         cache: AttentionCache, current_token: int) -> ExitDecision:
    """Process one input token with early-exit checks at every tap."""
    _check_setup(model, bank, table)
    cfg = model.config
    pos = cache.length
    if pos >= cfg.max_seq_len:
        raise CapacityError(f"cache full at max_seq_len {cfg.max_seq_len}")
    blocks_before = cache.blocks_executed
    x = embed_position(model, current_token, pos)
    confidences: list[float] = []
    tap_set = {tap: ki for ki, tap in enumerate(cfg.exit_taps)}
    for layer in range(cfg.n_layers):
        x = block_step(model, cache, layer, x, pos)
        block_index = layer + 1
        ki = tap_set.get(block_index)
        if ki is None:
            continue
        p = head_distribution(bank.heads[ki], x)
        c = confidence(table.metric, p)
        confidences.append(c)
        if c >= table.tau[ki]:
            token = int(np.argmax(p))
            if cache.fill_mode is FillMode.STATE_COPY:
                for skipped in range(layer + 1, cfg.n_layers):
                    fill_kv_state_copy(model, cache, skipped, x, pos)
            else:
                xx = x
                for skipped in range(layer + 1, cfg.n_layers):
                    xx = block_step(model, cache, skipped, xx, pos)
            cache.length += 1
            return ExitDecision(
                exited_at=ki,
                confidence_values=confidences,
                token=token,
                blocks_executed=cache.blocks_executed - blocks_before,
                tap_block=block_index,
            )
    logits = final_logits_from_hidden(model, x)
    cache.length += 1
    return ExitDecision(
        exited_at=None,
        confidence_values=confidences,
        token=int(np.argmax(logits)),
        blocks_executed=cache.blocks_executed - blocks_before,
        tap_block=None,
    )


def _totals(model, decisions, tokens, kv_fills, fill_mode) -> GenerationTrace:
    k = len(model.config.exit_taps)
    per_head = [0] * k
    final = 0
    for d in decisions:
        if d.exited_at is None:
            final += 1
        else:
            per_head[d.exited_at] += 1
    executed = sum(d.blocks_executed for d in decisions)
    baseline = len(decisions) * model.config.n_layers
    return GenerationTrace(
        decisions=decisions,
        tokens=tokens,
        per_head_exits=per_head,
        final_exits=final,
        blocks_executed=executed,
        baseline_blocks=baseline,
        speedup=baseline / executed,
        kv_fills=kv_fills,
        fill_mode=fill_mode,
    )


def generate(model: Backbone, bank: HeadBank, table: ThresholdTable, prompt,
             max_tokens: int, fill_mode: FillMode | str = FillMode.STATE_COPY
             ) -> GenerationTrace:
    """Early-exit autoregressive generation from a text prompt (or token ids)."""
    _check_setup(model, bank, table)
    fill_mode = FillMode(fill_mode)
    toks = encode_text(prompt) if isinstance(prompt, str) else np.asarray(prompt)
    toks = model.validate_tokens(toks)
    if toks.size + max_tokens > model.config.max_seq_len:
        raise CapacityError(
            f"prompt ({toks.size}) + max_tokens ({max_tokens}) exceeds "
            f"max_seq_len {model.config.max_seq_len}"
        )
    cache = AttentionCache(model.config, fill_mode)
    prefill(model, cache, toks[:-1])
    fills_before = cache.kv_fills
    cur = int(toks[-1])
    decisions: list[ExitDecision] = []
    tokens: list[int] = []
    for _ in range(max_tokens):
        dec = step(model, bank, table, cache, cur)
        decisions.append(dec)
        tokens.append(dec.token)
        cur = dec.token
    return _totals(model, decisions, tokens, cache.kv_fills - fills_before, fill_mode)


def backbone_greedy(model: Backbone, prompt, max_tokens: int) -> list[int]:
    """Reference full-depth greedy continuation (no exits, same step path)."""
    toks = encode_text(prompt) if isinstance(prompt, str) else np.asarray(prompt)
    out, _ = generate_tokens(model, toks, max_tokens)
    return out


def teacher_forced_decisions(model: Backbone, bank: HeadBank, table: ThresholdTable,
                             prompt_tokens, reference: list[int],
                             fill_mode: FillMode | str) -> list[ExitDecision]:
    """Early-exit decisions along a fixed token sequence.

    At each position the engine predicts the next token (with exits), then
    the reference token is appended regardless, so every position is scored
    against the same context.
    """
    _check_setup(model, bank, table)
    toks = model.validate_tokens(prompt_tokens)
    if toks.size + len(reference) > model.config.max_seq_len:
        raise CapacityError("prompt + reference exceeds max_seq_len")
    cache = AttentionCache(model.config, FillMode(fill_mode))
    prefill(model, cache, toks[:-1])
    cur = int(toks[-1])
    decisions = []
    for ref in reference:
        decisions.append(step(model, bank, table, cache, cur))
        cur = int(ref)
    return decisions


def exit_depths(decisions: list[ExitDecision], n_layers: int) -> list[int]:
    """Blocks needed for emission per decision (tap block, or full depth)."""
    return [d.tap_block if d.tap_block is not None else n_layers for d in decisions]


def agreement_eval(model: Backbone, bank: HeadBank, table: ThresholdTable,
                   prompts: list[str], gen_len: int,
                   fill_mode: FillMode | str = FillMode.STATE_COPY) -> dict:
    """Teacher-forced agreement against backbone greedy references.

    The backbone first generates a reference continuation per prompt; the
    early-exit engine is then forced along those tokens and scored
    position-by-position on emitting the same token the backbone chose.
    Reports overall agreement, per-head exit fractions and precision
    (agreement among that head's exits), mean blocks per token, and the
    block-count speedup.
    """
    if not prompts:
        raise ConfigurationError("agreement_eval needs at least one prompt")
    fill_mode = FillMode(fill_mode)
    k = len(model.config.exit_taps)
    agree = 0
    total = 0
    per_head_exits = [0] * k
    per_head_agree = [0] * k
    final_exits = 0
    final_agree = 0
    executed = 0
    for prompt in prompts:
        toks = encode_text(prompt)
        reference = backbone_greedy(model, toks, gen_len)
        decisions = teacher_forced_decisions(model, bank, table, toks, reference,
                                             fill_mode)
        for dec, ref in zip(decisions, reference):
            hit = int(dec.token == int(ref))
            agree += hit
            total += 1
            executed += dec.blocks_executed
            if dec.exited_at is None:
                final_exits += 1
                final_agree += hit
            else:
                per_head_exits[dec.exited_at] += 1
                per_head_agree[dec.exited_at] += hit
    baseline = total * model.config.n_layers
    return {
        "agreement": agree / total,
        "tokens": total,
        "per_head": [
            {
                "tap_block": model.config.exit_taps[i],
                "exits": per_head_exits[i],
                "exit_fraction": per_head_exits[i] / total,
                "precision": (per_head_agree[i] / per_head_exits[i])
                if per_head_exits[i] else None,
            }
            for i in range(k)
        ],
        "final": {
            "exits": final_exits,
            "exit_fraction": final_exits / total,
            "precision": (final_agree / final_exits) if final_exits else None,
        },
        "mean_blocks_per_token": executed / total,
        "blocks_executed": executed,
        "baseline_blocks": baseline,
        "speedup": baseline / executed,
        "fill_mode": fill_mode.value,
        "epsilon": table.epsilon,
        "metric": table.metric.value,
    }
