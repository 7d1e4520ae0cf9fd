"""Frozen decoder-only transformer backbone with per-layer exit taps.

Architecture: learned token + absolute position embeddings, pre-norm blocks
(causal multi-head self-attention, then a GELU feed-forward), a final layer
norm, and a bias-free projection to vocabulary logits. Linear maps carry no
biases; layer norms carry gain and bias. Hidden states are "tapped" after
the blocks listed in ``ModelConfig.exit_taps`` (post-residual block output).

The backbone is trained once with `pretrain` (manual backpropagation, Adam)
and is immutable afterwards: exit-head training never touches it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, CapacityError, DataError
from .optim import Adam
from .rng import Rng

log = logging.getLogger(__name__)

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the single source of truth for shapes."""

    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 8
    n_attn_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    exit_taps: tuple[int, ...] = (2, 4, 6)
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "exit_taps", tuple(int(t) for t in self.exit_taps))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.vocab_size < 2:
            problems.append(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_attn_heads != 0:
            problems.append(
                f"d_model={self.d_model} not divisible by n_attn_heads={self.n_attn_heads}"
            )
        if self.n_layers < 2:
            problems.append(f"n_layers must be >= 2, got {self.n_layers}")
        taps = self.exit_taps
        if not taps:
            problems.append("exit_taps must name at least one block")
        if any(t < 1 or t > self.n_layers - 1 for t in taps):
            problems.append(f"exit_taps {taps} outside [1, n_layers-1]")
        if list(taps) != sorted(set(taps)):
            problems.append(f"exit_taps {taps} not strictly ascending")
        if self.max_seq_len < 1:
            problems.append(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if problems:
            raise ArgumentError("invalid model config: " + "; ".join(problems))

    @property
    def n_taps(self) -> int:
        return len(self.exit_taps)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_attn_heads": self.n_attn_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "exit_taps": list(self.exit_taps),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vocab_size=int(d["vocab_size"]),
            d_model=int(d["d_model"]),
            n_layers=int(d["n_layers"]),
            n_attn_heads=int(d["n_attn_heads"]),
            d_ff=int(d["d_ff"]),
            max_seq_len=int(d["max_seq_len"]),
            exit_taps=tuple(d["exit_taps"]),
            seed=int(d["seed"]),
        )


class BlockParams:
    """Parameters of one transformer block."""

    NAMES = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "w2")

    def __init__(self, ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2):
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.ln2_g, self.ln2_b = ln2_g, ln2_b
        self.w1, self.w2 = w1, w2

    def items(self):
        for name in self.NAMES:
            yield name, getattr(self, name)


@dataclass
class ForwardTrace:
    """Outputs of one full forward pass for the last sequence position."""

    hidden_at_tap: dict[int, np.ndarray]
    final_logits: np.ndarray
    per_block_hidden: list[np.ndarray] | None = None
    per_position_logits: np.ndarray | None = None


class Backbone:
    """The frozen main model: embeddings, blocks, final norm, lm head."""

    def __init__(self, config: ModelConfig, tok_emb, pos_emb, blocks, lnf_g, lnf_b, lm_head):
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.lnf_g = lnf_g
        self.lnf_b = lnf_b
        self.lm_head = lm_head

    @classmethod
    def init_random(cls, config: ModelConfig, rng: Rng | None = None,
                    dtype=np.float32) -> "Backbone":
        """Fresh random model. Residual projections get the depth-scaled std."""
        if rng is None:
            rng = Rng(config.seed)
        d, f, v = config.d_model, config.d_ff, config.vocab_size
        resid_std = INIT_STD / np.sqrt(2.0 * config.n_layers)
        tok_emb = rng.normals((v, d), INIT_STD, dtype)
        pos_emb = rng.normals((config.max_seq_len, d), INIT_STD, dtype)
        blocks = []
        for _ in range(config.n_layers):
            blocks.append(BlockParams(
                ln1_g=np.ones(d, dtype), ln1_b=np.zeros(d, dtype),
                wq=rng.normals((d, d), INIT_STD, dtype),
                wk=rng.normals((d, d), INIT_STD, dtype),
                wv=rng.normals((d, d), INIT_STD, dtype),
                wo=rng.normals((d, d), resid_std, dtype),
                ln2_g=np.ones(d, dtype), ln2_b=np.zeros(d, dtype),
                w1=rng.normals((d, f), INIT_STD, dtype),
                w2=rng.normals((f, d), resid_std, dtype),
            ))
        return cls(
            config,
            tok_emb=tok_emb,
            pos_emb=pos_emb,
            blocks=blocks,
            lnf_g=np.ones(d, dtype),
            lnf_b=np.zeros(d, dtype),
            lm_head=rng.normals((d, v), INIT_STD, dtype),
        )

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def param_items(self):
        """(name, array) pairs in the canonical serialization order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.items():
                yield f"block{i}.{name}", arr
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b
        yield "lm_head", self.lm_head

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.param_items())

    def num_params(self) -> int:
        return sum(int(a.size) for _, a in self.param_items())

    def fingerprint(self) -> str:
        """sha256 over raw parameter bytes; used by freeze-contract checks."""
        h = hashlib.sha256()
        for _, arr in self.param_items():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def validate_tokens(self, tokens) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.ndim != 1 or toks.size == 0:
            raise ArgumentError("token sequence must be non-empty and 1-D")
        if toks.size > self.config.max_seq_len:
            raise CapacityError(
                f"sequence length {toks.size} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if (toks < 0).any() or (toks >= self.config.vocab_size).any():
            raise ArgumentError("token id outside [0, vocab_size)")
        return toks


def _block_forward(blk: BlockParams, h, n_heads, keep=None):
    """One block over (B, T, d) hidden states. Records into `keep` if given."""
    b, t, d = h.shape
    rows = h.reshape(b * t, d)
    a, mu1, rs1 = kernels.layer_norm_fwd(rows, blk.ln1_g, blk.ln1_b, LN_EPS)
    q = kernels.matmul(a, blk.wq).reshape(b, t, d)
    k = kernels.matmul(a, blk.wk).reshape(b, t, d)
    v = kernels.matmul(a, blk.wv).reshape(b, t, d)
    ctx, probs = kernels.attention_fwd(q, k, v, n_heads)
    attn_out = kernels.matmul(ctx.reshape(b * t, d), blk.wo)
    h_mid = h + attn_out.reshape(b, t, d)
    mid_rows = h_mid.reshape(b * t, d)
    bn, mu2, rs2 = kernels.layer_norm_fwd(mid_rows, blk.ln2_g, blk.ln2_b, LN_EPS)
    u = kernels.matmul(bn, blk.w1)
    g = kernels.gelu_fwd(u)
    y = kernels.matmul(g, blk.w2)
    h_out = h_mid + y.reshape(b, t, d)
    if keep is not None:
        keep.update(h_in=h, a=a, mu1=mu1, rs1=rs1, q=q, k=k, v=v, probs=probs,
                    ctx=ctx, h_mid=h_mid, bn=bn, mu2=mu2, rs2=rs2, u=u, g=g)
    return h_out


def _block_backward(blk: BlockParams, keep, dh_out, n_heads, grads, prefix):
    """Adjoint of `_block_forward`; returns dL/dh_in, fills grads[prefix+name]."""
    b, t, d = dh_out.shape
    n = b * t
    # feed-forward branch
    dy = dh_out.reshape(n, d)
    grads[prefix + "w2"] = kernels.matmul_tn(keep["g"], dy)
    dg = kernels.matmul_nt(dy, blk.w2)
    du = kernels.gelu_bwd(keep["u"], dg)
    grads[prefix + "w1"] = kernels.matmul_tn(keep["bn"], du)
    dbn = kernels.matmul_nt(du, blk.w1)
    dmid_rows, dg2, db2 = kernels.layer_norm_bwd(
        dbn, keep["h_mid"].reshape(n, d), blk.ln2_g, keep["mu2"], keep["rs2"])
    grads[prefix + "ln2_g"] = dg2
    grads[prefix + "ln2_b"] = db2
    dh_mid = dh_out + dmid_rows.reshape(b, t, d)
    # attention branch
    do_rows = dh_mid.reshape(n, d)
    grads[prefix + "wo"] = kernels.matmul_tn(keep["ctx"].reshape(n, d), do_rows)
    dctx = kernels.matmul_nt(do_rows, blk.wo).reshape(b, t, d)
    dq, dk, dv = kernels.attention_bwd(dctx, keep["q"], keep["k"], keep["v"],
                                       keep["probs"], n_heads)
    a = keep["a"]
    grads[prefix + "wq"] = kernels.matmul_tn(a, dq.reshape(n, d))
    grads[prefix + "wk"] = kernels.matmul_tn(a, dk.reshape(n, d))
    grads[prefix + "wv"] = kernels.matmul_tn(a, dv.reshape(n, d))
    da = kernels.matmul_nt(dq.reshape(n, d), blk.wq)
    da = da + kernels.matmul_nt(dk.reshape(n, d), blk.wk)
    da = da + kernels.matmul_nt(dv.reshape(n, d), blk.wv)
    din_rows, dg1, db1 = kernels.layer_norm_bwd(
        da, keep["h_in"].reshape(n, d), blk.ln1_g, keep["mu1"], keep["rs1"])
    grads[prefix + "ln1_g"] = dg1
    grads[prefix + "ln1_b"] = db1
    return dh_mid + din_rows.reshape(b, t, d)


def _embed(model: Backbone, tokens2d: np.ndarray) -> np.ndarray:
    t = tokens2d.shape[1]
    return model.tok_emb[tokens2d] + model.pos_emb[:t][None, :, :]


def loss_and_grads(model: Backbone, inputs: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy over a (B, T) batch plus all parameter
    gradients, via manual backpropagation. Returns (loss, grads dict)."""
    b, t = inputs.shape
    n = b * t
    cfg = model.config
    h = _embed(model, inputs)
    keeps = []
    for blk in model.blocks:
        keep: dict = {}
        h = _block_forward(blk, h, cfg.n_attn_heads, keep)
        keeps.append(keep)
    rows = h.reshape(n, cfg.d_model)
    fn, muf, rsf = kernels.layer_norm_fwd(rows, model.lnf_g, model.lnf_b, LN_EPS)
    logits = kernels.matmul(fn, model.lm_head)
    loss_sum, dlogits = kernels.cross_entropy_grad_rows(logits, targets.reshape(n))
    loss = loss_sum / n
    dlogits = (dlogits.astype(np.float64) / n).astype(model.dtype)

    grads: dict[str, np.ndarray] = {}
    grads["lm_head"] = kernels.matmul_tn(fn, dlogits)
    dfn = kernels.matmul_nt(dlogits, model.lm_head)
    drows, dgf, dbf = kernels.layer_norm_bwd(dfn, rows, model.lnf_g, muf, rsf)
    grads["lnf_g"] = dgf
    grads["lnf_b"] = dbf
    dh = drows.reshape(b, t, cfg.d_model)
    for i in range(cfg.n_layers - 1, -1, -1):
        dh = _block_backward(model.blocks[i], keeps[i], dh, cfg.n_attn_heads,
                             grads, f"block{i}.")
    drows0 = dh.reshape(n, cfg.d_model)
    grads["tok_emb"] = kernels.embedding_grad(inputs.reshape(n), drows0, cfg.vocab_size)
    dpos = np.zeros_like(model.pos_emb)
    dpos_active = dh.sum(axis=0, dtype=np.float64)
    dpos[:t] = dpos_active.astype(model.dtype)
    grads["pos_emb"] = dpos
    return loss, grads


def forward_full(model: Backbone, tokens, record_per_block: bool = False) -> ForwardTrace:
    """Full-depth causal pass; hidden states at each configured tap plus the
    final logits, all for the last position. `record_per_block` additionally
    stores every block's full output and per-position logits (evaluation use).
    """
    toks = model.validate_tokens(tokens)
    cfg = model.config
    t = toks.size
    h = _embed(model, toks[None, :])
    hidden_at_tap = {}
    per_block = [] if record_per_block else None
    for i, blk in enumerate(model.blocks):
        h = _block_forward(blk, h, cfg.n_attn_heads)
        block_index = i + 1
        if block_index in cfg.exit_taps:
            hidden_at_tap[block_index] = h[0, t - 1].copy()
        if per_block is not None:
            per_block.append(h[0].copy())
    rows = h.reshape(t, cfg.d_model)
    fn, _, _ = kernels.layer_norm_fwd(rows, model.lnf_g, model.lnf_b, LN_EPS)
    logits = kernels.matmul(fn, model.lm_head)
    return ForwardTrace(
        hidden_at_tap=hidden_at_tap,
        final_logits=logits[t - 1].copy(),
        per_block_hidden=per_block,
        per_position_logits=logits.copy() if record_per_block else None,
    )


def next_token_distribution(model: Backbone, tokens) -> np.ndarray:
    """softmax over the final logits: the teacher distribution p over tokens."""
    from .mathops import softmax

    return softmax(forward_full(model, tokens).final_logits)


def pretrain(corpus: bytes, config: ModelConfig, steps: int, lr: float, batch: int,
             *, window: int | None = None, log_every: int = 50) -> tuple[Backbone, list[float]]:
    """Train a fresh backbone on next-byte prediction over a byte corpus.

    Windows of `window` (+1 for targets) bytes are sampled uniformly at random
    positions each step. Fully deterministic given config.seed: same seed,
    same corpus, same hyperparameters give bit-identical parameters.

    Returns the trained model and the per-step loss history.
    """
    if steps < 1:
        raise ArgumentError(f"steps must be >= 1, got {steps}")
    if batch < 1:
        raise ArgumentError(f"batch must be >= 1, got {batch}")
    data = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    if data.size < config.max_seq_len + 1:
        raise DataError(
            f"corpus has {data.size} bytes; need at least max_seq_len+1 = "
            f"{config.max_seq_len + 1}"
        )
    if config.vocab_size < 256 and data.max() >= config.vocab_size:
        raise DataError(
            f"corpus contains byte {int(data.max())} outside vocab_size {config.vocab_size}"
        )
    if window is None:
        window = min(128, config.max_seq_len)
    window = min(window, config.max_seq_len)

    model = Backbone.init_random(config)
    data_rng = Rng(config.seed).child(1)
    opt = Adam(model.param_dict(), lr=lr)
    params = model.param_dict()
    n_starts = data.size - window
    losses: list[float] = []
    for step in range(steps):
        starts = data_rng.integers(n_starts, batch)
        chunk = np.stack([data[s:s + window + 1] for s in starts])
        loss, grads = loss_and_grads(model, chunk[:, :-1], chunk[:, 1:])
        opt.step(params, grads)
        losses.append(loss)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("pretrain step %d/%d loss %.4f", step, steps, loss)
    return model, losses
