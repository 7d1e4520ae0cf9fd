"""Early-exit classifier heads.

Each head reads the hidden state tapped after one configured block and maps
it to vocabulary logits through its own layer norm and a bias-free linear
projection -- structurally the same map the backbone applies after its last
block. Heads are independent: they share no parameters with each other or
with the backbone (the copied init duplicates values, not storage).
"""

from __future__ import annotations

import hashlib
from enum import Enum

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError
from .mathops import softmax
from .model import LN_EPS, Backbone
from .rng import Rng

HEAD_INIT_STD = 0.02


class InitMode(str, Enum):
    SCRATCH = "scratch"
    COPIED = "copied"


class ExitHead:
    """One per-tap classifier: layer norm then projection to logits."""

    def __init__(self, tap_index: int, norm_gain, norm_bias, proj, init_mode: InitMode):
        self.tap_index = tap_index
        self.norm_gain = norm_gain
        self.norm_bias = norm_bias
        self.proj = proj
        self.init_mode = init_mode

    def param_items(self):
        yield "norm_gain", self.norm_gain
        yield "norm_bias", self.norm_bias
        yield "proj", self.proj


class HeadBank:
    """All exit heads of a model, ascending by tap index."""

    def __init__(self, heads: list[ExitHead], init_mode: InitMode):
        self.heads = heads
        self.init_mode = init_mode

    def __len__(self) -> int:
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)

    @property
    def tap_indices(self) -> tuple[int, ...]:
        return tuple(h.tap_index for h in self.heads)

    def param_items(self):
        for i, head in enumerate(self.heads):
            for name, arr in head.param_items():
                yield f"head{i}.{name}", arr

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.param_items())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for _, arr in self.param_items():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_heads(model: Backbone, mode: InitMode | str, rng: Rng | None = None) -> HeadBank:
    """Build one head per configured tap.

    Scratch: norm gain 1 / bias 0, projection ~ N(0, 0.02^2) from `rng`.
    Copied: norm parameters from the backbone's final norm and projection
    from its lm head, so the deepest heads start as strong imitators.
    """
    mode = InitMode(mode)
    cfg = model.config
    if mode is InitMode.SCRATCH and rng is None:
        raise ArgumentError("scratch init requires an Rng")
    dtype = model.dtype
    heads = []
    for tap in cfg.exit_taps:
        if mode is InitMode.COPIED:
            head = ExitHead(tap, model.lnf_g.copy(), model.lnf_b.copy(),
                            model.lm_head.copy(), mode)
        else:
            head = ExitHead(
                tap,
                np.ones(cfg.d_model, dtype),
                np.zeros(cfg.d_model, dtype),
                rng.normals((cfg.d_model, cfg.vocab_size), HEAD_INIT_STD, dtype),
                mode,
            )
        heads.append(head)
    return HeadBank(heads, mode)


def head_logits(head: ExitHead, hidden: np.ndarray) -> np.ndarray:
    """Vocabulary logits for one hidden vector: layer_norm(hidden) @ proj."""
    h = np.ascontiguousarray(hidden, dtype=head.proj.dtype)
    if h.ndim != 1 or h.size != head.proj.shape[0]:
        raise DimensionError(
            f"hidden length {h.shape} does not match head d_model {head.proj.shape[0]}"
        )
    normed, _, _ = kernels.layer_norm_fwd(h.reshape(1, -1), head.norm_gain,
                                          head.norm_bias, LN_EPS)
    return kernels.matmul(normed, head.proj)[0]


def head_logits_rows(head: ExitHead, hidden_rows: np.ndarray) -> np.ndarray:
    """Batched `head_logits` over (N, d_model) rows; returns (N, V)."""
    normed, _, _ = kernels.layer_norm_fwd(hidden_rows, head.norm_gain,
                                          head.norm_bias, LN_EPS)
    return kernels.matmul(normed, head.proj)


def head_distribution(head: ExitHead, hidden: np.ndarray) -> np.ndarray:
    """Probability distribution p_k emitted by head k at this hidden state."""
    return softmax(head_logits(head, hidden))
