"""Self-supervised training of exit heads against the frozen backbone.

The backbone greedily extends a set of text prompts; every generated
position yields one training sample: the tapped hidden states plus the
backbone's full next-token distribution as the soft target. Heads minimize

    (1 - lambda) * CE(head logits, teacher) - lambda * Entropy(head probs)

summed over heads. The entropy term pushes under-informed heads toward the
uniform distribution so that confidence scores separate reliable from
unreliable predictions instead of saturating.

Only head parameters receive gradients; the backbone is read-only here.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .decoding import encode_text, generate_tokens
from .errors import ArgumentError, DimensionError
from .heads import HeadBank
from .mathops import cross_entropy, entropy, softmax, validate_prob_vector
from .model import LN_EPS, Backbone
from .optim import Adam
from .rng import Rng

log = logging.getLogger(__name__)

DEFAULT_TRAIN_PROMPTS = (
    "This is an example script:",
    "My name is",
    "I am a",
    "Welcome to",
    "what is a",
)


@dataclass
class TrainSample:
    """One self-generated supervision point."""

    hidden_at_tap: dict[int, np.ndarray]
    teacher: np.ndarray
    teacher_argmax: int


@dataclass
class TrainSettings:
    lam: float = 0.1
    lr: float = 1e-3
    steps: int = 2000
    batch_prompts: tuple[str, ...] = DEFAULT_TRAIN_PROMPTS
    gen_len: int = 64
    seed: int = 42
    refresh_every: int = 250
    context_window: int = 128
    temperature: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ArgumentError(f"lambda must be in [0, 1], got {self.lam}")
        if self.lr <= 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if not self.batch_prompts:
            raise ArgumentError("batch_prompts must be non-empty")
        if self.gen_len < 1:
            raise ArgumentError(f"gen_len must be >= 1, got {self.gen_len}")
        if self.context_window <= self.gen_len:
            raise ArgumentError("context_window must exceed gen_len")


@dataclass
class TrainLogRow:
    step: int
    head_index: int
    loss: float
    accuracy: float
    entropy: float


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    def head_series(self, head_index: int, attr: str) -> list[float]:
        return [getattr(r, attr) for r in self.rows if r.head_index == head_index]

    def step_mean(self, step: int, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if r.step == step]
        return float(np.mean(vals))

    def last_step(self) -> int:
        return max(r.step for r in self.rows)

    def write_csv(self, path, **metadata) -> None:
        from .ioutil import atomic_write_text

        lines = []
        if metadata:
            meta = " ".join(f"{k}={v}" for k, v in sorted(metadata.items()))
            lines.append(f"# {meta}")
        lines.append("step,head_index,loss,accuracy,entropy")
        for r in self.rows:
            lines.append(f"{r.step},{r.head_index},{r.loss!r},{r.accuracy!r},{r.entropy!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, "r", encoding="utf-8") as fh:
            rows = [ln for ln in fh if not ln.startswith("#")]
        out = cls()
        for row in csv.DictReader(rows):
            out.rows.append(TrainLogRow(
                step=int(row["step"]), head_index=int(row["head_index"]),
                loss=float(row["loss"]), accuracy=float(row["accuracy"]),
                entropy=float(row["entropy"]),
            ))
        return out


def head_loss(head_logits_k, teacher, lam: float) -> float:
    """(1-lambda)*CE(logits, teacher) - lambda*Entropy(softmax(logits))."""
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda must be in [0, 1], got {lam}")
    z = np.asarray(head_logits_k, dtype=np.float64)
    t = validate_prob_vector(teacher, "teacher")
    if z.shape != t.shape:
        raise DimensionError(f"logits {z.shape} vs teacher {t.shape}")
    return (1.0 - lam) * cross_entropy(z, t) - lam * entropy(softmax(z))


def head_loss_grad(head_logits_k, teacher, lam: float) -> np.ndarray:
    """Gradient of `head_loss` with respect to the logits.

    With p = softmax(z) and H = Entropy(p):
        (1 - lambda) * (p - teacher) + lambda * p * (log p + H).
    """
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda must be in [0, 1], got {lam}")
    z = np.asarray(head_logits_k, dtype=np.float64)
    t = validate_prob_vector(teacher, "teacher")
    if z.shape != t.shape:
        raise DimensionError(f"logits {z.shape} vs teacher {t.shape}")
    p = softmax(z)
    h = entropy(p)
    plogp = np.where(p > 0.0, p * (np.log(np.clip(p, 1e-300, None)) + h), 0.0)
    return (1.0 - lam) * (p - t) + lam * plogp


def build_batch(model: Backbone, prompts: list[str], gen_len: int, rng: Rng,
                temperature: float = 0.0) -> list[TrainSample]:
    """Generate `gen_len` tokens per prompt; every position is one sample."""
    if not prompts:
        raise ArgumentError("build_batch needs at least one prompt")
    if gen_len < 1:
        raise ArgumentError(f"gen_len must be >= 1, got {gen_len}")
    samples: list[TrainSample] = []
    for prompt in prompts:
        toks = encode_text(prompt) if isinstance(prompt, str) else prompt
        _, steps = generate_tokens(model, toks, gen_len, record=True,
                                   temperature=temperature, rng=rng)
        for rec in steps:
            teacher = softmax(rec.final_logits)
            samples.append(TrainSample(
                hidden_at_tap=rec.tap_hiddens,
                teacher=teacher,
                teacher_argmax=int(np.argmax(teacher)),
            ))
    return samples


class _BatchMatrices:
    """Samples re-packed as per-tap matrices for vectorized head updates."""

    def __init__(self, samples: list[TrainSample], taps: tuple[int, ...], dtype):
        n = len(samples)
        self.n = n
        self.hidden = {
            tap: np.ascontiguousarray(
                np.stack([s.hidden_at_tap[tap] for s in samples]), dtype=dtype)
            for tap in taps
        }
        self.teacher = np.stack([s.teacher for s in samples])  # (n, V) float64
        self.teacher_argmax = np.array([s.teacher_argmax for s in samples])


def _continue_contexts(model, contexts, gen_len, context_window, temperature, rng):
    """Extend each rolling context by gen_len tokens; returns fresh samples."""
    samples: list[TrainSample] = []
    for ctx in contexts:
        prefix = ctx[-(context_window - gen_len):]
        gen, steps = generate_tokens(model, np.asarray(prefix), gen_len, record=True,
                                     temperature=temperature, rng=rng)
        for rec in steps:
            teacher = softmax(rec.final_logits)
            samples.append(TrainSample(rec.tap_hiddens, teacher,
                                       int(np.argmax(teacher))))
        ctx.extend(gen)
    return samples


def train_heads(model: Backbone, bank: HeadBank, settings: TrainSettings
                ) -> tuple[HeadBank, TrainLog]:
    """Gradient steps on head parameters only; backbone stays frozen.

    Each step runs every head over the current sample batch (one full-batch
    update); the batch is regenerated every `refresh_every` steps by letting
    the backbone continue each prompt's rolling context. Losses, accuracy
    against the teacher argmax, and mean head entropy are logged per step
    and head, with step metrics computed before that step's update.
    """
    settings.validate()
    cfg = model.config
    if bank.tap_indices != cfg.exit_taps:
        raise ArgumentError(f"bank taps {bank.tap_indices} != model taps {cfg.exit_taps}")
    rng = Rng(settings.seed)
    contexts = [list(encode_text(p)) for p in settings.batch_prompts]
    opt = Adam(bank.param_dict(), lr=settings.lr)
    params = bank.param_dict()
    train_log = TrainLog()
    lam = settings.lam
    batch: _BatchMatrices | None = None
    for step_i in range(settings.steps):
        if step_i % settings.refresh_every == 0:
            samples = _continue_contexts(model, contexts, settings.gen_len,
                                         settings.context_window,
                                         settings.temperature, rng)
            batch = _BatchMatrices(samples, cfg.exit_taps, model.dtype)
            log.info("head training step %d: fresh batch of %d samples",
                     step_i, batch.n)
        grads: dict[str, np.ndarray] = {}
        for ki, head in enumerate(bank):
            x = batch.hidden[head.tap_index]
            normed, mu, rstd = kernels.layer_norm_fwd(x, head.norm_gain,
                                                      head.norm_bias, LN_EPS)
            logits = kernels.matmul(normed, head.proj)
            z = logits.astype(np.float64)
            zmax = z.max(axis=1, keepdims=True)
            e = np.exp(z - zmax)
            p = e / e.sum(axis=1, keepdims=True)
            logp = np.log(np.clip(p, 1e-300, None))
            ce_rows = -(batch.teacher * np.maximum(logp, np.log(1e-12))).sum(axis=1)
            ent_rows = -np.where(p > 0, p * logp, 0.0).sum(axis=1)
            loss_k = (1.0 - lam) * ce_rows.mean() - lam * ent_rows.mean()
            acc_k = float((np.argmax(z, axis=1) == batch.teacher_argmax).mean())
            train_log.rows.append(TrainLogRow(step_i, ki, float(loss_k), acc_k,
                                              float(ent_rows.mean())))
            dlogits = ((1.0 - lam) * (p - batch.teacher)
                       + lam * np.where(p > 0, p * (logp + ent_rows[:, None]), 0.0))
            dlogits = (dlogits / batch.n).astype(model.dtype)
            grads[f"head{ki}.proj"] = kernels.matmul_tn(normed, dlogits)
            dnormed = kernels.matmul_nt(dlogits, head.proj)
            _, dg, db = kernels.layer_norm_bwd(dnormed, x, head.norm_gain, mu, rstd)
            grads[f"head{ki}.norm_gain"] = dg
            grads[f"head{ki}.norm_bias"] = db
        opt.step(params, grads)
    return bank, train_log


def head_parameter_grads(head, hidden_rows: np.ndarray, teacher_rows: np.ndarray,
                         lam: float) -> dict[str, np.ndarray]:
    """Mean-loss gradients of one head's parameters over a sample batch.

    Same chain as `train_heads` uses; exposed so finite-difference checks can
    probe the full parameter gradient independently of the training loop.
    """
    n = hidden_rows.shape[0]
    normed, mu, rstd = kernels.layer_norm_fwd(hidden_rows, head.norm_gain,
                                              head.norm_bias, LN_EPS)
    logits = kernels.matmul(normed, head.proj)
    dlogits = np.stack([
        head_loss_grad(logits[i], teacher_rows[i], lam) for i in range(n)
    ]) / n
    dlogits = dlogits.astype(hidden_rows.dtype)
    grads = {"proj": kernels.matmul_tn(normed, dlogits)}
    dnormed = kernels.matmul_nt(dlogits, head.proj)
    _, dg, db = kernels.layer_norm_bwd(dnormed, hidden_rows, head.norm_gain, mu, rstd)
    grads["norm_gain"] = dg
    grads["norm_bias"] = db
    return grads


def batch_head_loss(head, hidden_rows: np.ndarray, teacher_rows: np.ndarray,
                    lam: float) -> float:
    """Mean `head_loss` of one head over a sample batch (for checks)."""
    normed, _, _ = kernels.layer_norm_fwd(hidden_rows, head.norm_gain,
                                          head.norm_bias, LN_EPS)
    logits = kernels.matmul(normed, head.proj)
    return float(np.mean([
        head_loss(logits[i], teacher_rows[i], lam) for i in range(hidden_rows.shape[0])
    ]))
