"""Kernel dispatch: numba-jitted hot loops with a pure-numpy fallback.

The backend is chosen once at import from the ``EARLYEXIT_BACKEND``
environment variable (``numba`` or ``numpy``) and can be switched at runtime
with `set_backend` (the benchmark uses this to compare both in one process).
Default is numba when importable, else numpy with a warning.

float64 inputs always run on the numpy reference path regardless of backend:
the jitted kernels are compiled for the pipeline's float32 storage, while
float64 is only used by verification code (gradient checks against finite
differences) where the reference semantics are wanted anyway.
"""

from __future__ import annotations

import logging
import os

import numpy as np

from . import numpy_ops

log = logging.getLogger(__name__)

_BACKENDS = {"numpy": numpy_ops}

try:
    from . import numba_ops

    _BACKENDS["numba"] = numba_ops
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_ops = None
    log.warning("numba unavailable; falling back to the pure-numpy backend")


def _initial_backend() -> str:
    requested = os.environ.get("EARLYEXIT_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ValueError(
                f"EARLYEXIT_BACKEND={requested!r} not available; "
                f"choose one of {sorted(_BACKENDS)}"
            )
        return requested
    return "numba" if "numba" in _BACKENDS else "numpy"


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def active_backend() -> str:
    """Name of the backend currently serving float32 kernel calls."""
    return _active_name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    """Switch the float32 kernel backend ('numba' or 'numpy')."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose one of {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


def _impl(a: np.ndarray):
    return numpy_ops if a.dtype == np.float64 else _active


def matmul(a, b):
    return _impl(a).matmul(a, b)


def matmul_tn(a, b):
    return _impl(a).matmul_tn(a, b)


def matmul_nt(a, b):
    return _impl(a).matmul_nt(a, b)


def layer_norm_fwd(x, gain, bias, eps):
    return _impl(x).layer_norm_fwd(x, gain, bias, eps)


def layer_norm_bwd(dy, x, gain, mean, rstd):
    return _impl(x).layer_norm_bwd(dy, x, gain, mean, rstd)


def gelu_fwd(x):
    return _impl(x).gelu_fwd(x)


def gelu_bwd(x, dy):
    return _impl(x).gelu_bwd(x, dy)


def attention_fwd(q, k, v, n_heads):
    return _impl(q).attention_fwd(q, k, v, n_heads)


def attention_bwd(dctx, q, k, v, probs, n_heads):
    return _impl(q).attention_bwd(dctx, q, k, v, probs, n_heads)


def attend_one(q, k_cache, v_cache, n_heads):
    return _impl(q).attend_one(q, k_cache, v_cache, n_heads)


def cross_entropy_grad_rows(logits, targets):
    return _impl(logits).cross_entropy_grad_rows(logits, targets)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    return _impl(param).adam_step(param, grad, m, v, t, lr, beta1, beta2, eps)


def embedding_grad(tokens, dh, vocab_size):
    return _impl(dh).embedding_grad(tokens, dh, vocab_size)
