"""Incremental token-by-token decoding with per-layer key/value caching.

This is the machinery shared by backbone generation (teacher references,
batch building, calibration) and by the early-exit engine in `runtime`:
one position at a time, each block appends its key/value row to the cache
and attends over everything cached so far. With the fixed-order kernels a
cached pass is bit-identical to the equivalent full-sequence pass.

Cache fill modes, relevant only when layers are skipped by an early exit:

* ``state-copy``: skipped layers get key/value rows projected (through each
  layer's own attention norm) from the hidden state at the exit tap; cheap,
  approximate, the default at generation time.
* ``exact``: skipped layers actually run to populate the cache; no compute
  saving, used as a correctness reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import ArgumentError, CapacityError
from .model import LN_EPS, Backbone


class FillMode(str, Enum):
    STATE_COPY = "state-copy"
    EXACT = "exact"


class AttentionCache:
    """Per-layer key/value memory for one generation session.

    Invariant: after a position has been processed, every layer holds exactly
    one key/value row for it, no matter where that position exited.
    `blocks_executed` counts full block executions (the instrumentation the
    traces are cross-checked against); `kv_fills` counts state-copy fill
    projections for skipped layers.
    """

    def __init__(self, config, fill_mode: FillMode | str = FillMode.STATE_COPY,
                 dtype=np.float32):
        self.config = config
        self.fill_mode = FillMode(fill_mode)
        shape = (config.max_seq_len, config.d_model)
        self.k = [np.zeros(shape, dtype) for _ in range(config.n_layers)]
        self.v = [np.zeros(shape, dtype) for _ in range(config.n_layers)]
        self.length = 0
        self.blocks_executed = 0
        self.kv_fills = 0


def block_step(model: Backbone, cache: AttentionCache, layer: int,
               x: np.ndarray, pos: int) -> np.ndarray:
    """Run one block for the newest position; appends this layer's k/v row."""
    blk = model.blocks[layer]
    cfg = model.config
    a, _, _ = kernels.layer_norm_fwd(x.reshape(1, -1), blk.ln1_g, blk.ln1_b, LN_EPS)
    q = kernels.matmul(a, blk.wq)[0]
    cache.k[layer][pos] = kernels.matmul(a, blk.wk)[0]
    cache.v[layer][pos] = kernels.matmul(a, blk.wv)[0]
    ctx = kernels.attend_one(q, cache.k[layer][:pos + 1], cache.v[layer][:pos + 1],
                             cfg.n_attn_heads)
    x = x + kernels.matmul(ctx.reshape(1, -1), blk.wo)[0]
    bn, _, _ = kernels.layer_norm_fwd(x.reshape(1, -1), blk.ln2_g, blk.ln2_b, LN_EPS)
    y = kernels.matmul(kernels.gelu_fwd(kernels.matmul(bn, blk.w1)), blk.w2)
    x = x + y[0]
    cache.blocks_executed += 1
    return x


def fill_kv_state_copy(model: Backbone, cache: AttentionCache, layer: int,
                       x_tap: np.ndarray, pos: int) -> None:
    """Give a skipped layer k/v rows as if `x_tap` were its input hidden."""
    blk = model.blocks[layer]
    a, _, _ = kernels.layer_norm_fwd(x_tap.reshape(1, -1), blk.ln1_g, blk.ln1_b, LN_EPS)
    cache.k[layer][pos] = kernels.matmul(a, blk.wk)[0]
    cache.v[layer][pos] = kernels.matmul(a, blk.wv)[0]
    cache.kv_fills += 1


def final_logits_from_hidden(model: Backbone, x: np.ndarray) -> np.ndarray:
    fn, _, _ = kernels.layer_norm_fwd(x.reshape(1, -1), model.lnf_g, model.lnf_b, LN_EPS)
    return kernels.matmul(fn, model.lm_head)[0]


def embed_position(model: Backbone, token: int, pos: int) -> np.ndarray:
    return model.tok_emb[token] + model.pos_emb[pos]


@dataclass
class StepRecord:
    """Per-generated-token record: tapped hidden states and final logits."""

    tap_hiddens: dict[int, np.ndarray]
    final_logits: np.ndarray


def full_step(model: Backbone, cache: AttentionCache, token: int,
              collect_taps: bool = False):
    """Process one token through every layer. Returns (final_logits, taps)."""
    pos = cache.length
    if pos >= model.config.max_seq_len:
        raise CapacityError(
            f"cache full: position {pos} at max_seq_len {model.config.max_seq_len}"
        )
    x = embed_position(model, token, pos)
    taps: dict[int, np.ndarray] = {}
    for layer in range(model.config.n_layers):
        x = block_step(model, cache, layer, x, pos)
        if collect_taps and (layer + 1) in model.config.exit_taps:
            taps[layer + 1] = x.copy()
    cache.length += 1
    return final_logits_from_hidden(model, x), taps


def prefill(model: Backbone, cache: AttentionCache, tokens) -> None:
    """Run full-depth steps over context tokens, keeping only the cache."""
    for tok in tokens:
        full_step(model, cache, int(tok))


def encode_text(text: str) -> np.ndarray:
    """Byte-level tokenization: UTF-8 bytes are the token ids."""
    data = text.encode("utf-8")
    if not data:
        raise ArgumentError("prompt encodes to zero bytes")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode_tokens(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


def generate_tokens(model: Backbone, prompt_tokens, n_tokens: int,
                    record: bool = False, temperature: float = 0.0, rng=None):
    """Full-depth autoregressive continuation of a prompt.

    Greedy (argmax over final logits) unless `temperature` > 0, in which case
    tokens are sampled from softmax(logits / temperature) using `rng`.
    Returns (generated tokens, per-step records or None).
    """
    toks = model.validate_tokens(prompt_tokens)
    if n_tokens < 1:
        raise ArgumentError(f"n_tokens must be >= 1, got {n_tokens}")
    if toks.size + n_tokens > model.config.max_seq_len:
        raise CapacityError(
            f"prompt ({toks.size}) + n_tokens ({n_tokens}) exceeds "
            f"max_seq_len {model.config.max_seq_len}"
        )
    if temperature > 0 and rng is None:
        raise ArgumentError("sampling (temperature > 0) requires an Rng")
    cache = AttentionCache(model.config)
    prefill(model, cache, toks[:-1])
    cur = int(toks[-1])
    out: list[int] = []
    records: list[StepRecord] | None = [] if record else None
    for _ in range(n_tokens):
        logits, taps = full_step(model, cache, cur, collect_taps=record)
        if temperature > 0:
            z = logits.astype(np.float64) / temperature
            e = np.exp(z - z.max())
            p = e / e.sum()
            u = rng.uniform()
            nxt = int(np.searchsorted(np.cumsum(p), u, side="right"))
            nxt = min(nxt, p.size - 1)
        else:
            nxt = int(np.argmax(logits))
        out.append(nxt)
        if records is not None:
            records.append(StepRecord(taps, logits.copy()))
        cur = nxt
    return out, records
