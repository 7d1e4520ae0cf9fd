"""Pure-numpy reference implementations of the hot kernels.

Every kernel stores float32 (or whatever dtype comes in) but accumulates
reductions in float64, matching the numba twins in `numba_ops` to within
normal float32 rounding. These versions are dtype-generic and serve as the
reference path: float64 inputs are always routed here by the dispatcher.
"""

from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b without materializing the transpose at call sites."""
    return (a.T.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T."""
    return (a.astype(np.float64) @ b.T.astype(np.float64)).astype(a.dtype)


def layer_norm_fwd(x, gain, bias, eps):
    """Row-wise layer norm. Returns (y, mean, rstd); mean/rstd feed backward."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1)
    var = ((x64 - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x64 - mean[:, None]) * rstd[:, None] * gain.astype(np.float64) + bias.astype(np.float64)
    return y.astype(x.dtype), mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_bwd(dy, x, gain, mean, rstd):
    """Backward of layer_norm_fwd. Returns (dx, dgain, dbias)."""
    dy64 = dy.astype(np.float64)
    xhat = (x.astype(np.float64) - mean.astype(np.float64)[:, None]) * rstd.astype(np.float64)[:, None]
    dgain = (dy64 * xhat).sum(axis=0)
    dbias = dy64.sum(axis=0)
    dxhat = dy64 * gain.astype(np.float64)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd.astype(np.float64)[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)


def gelu_fwd(x):
    x64 = x.astype(np.float64)
    u = GELU_C * (x64 + GELU_A * x64 ** 3)
    return (0.5 * x64 * (1.0 + np.tanh(u))).astype(x.dtype)


def gelu_bwd(x, dy):
    x64 = x.astype(np.float64)
    u = GELU_C * (x64 + GELU_A * x64 ** 3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x64 ** 2)
    grad = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t ** 2) * du
    return (dy.astype(np.float64) * grad).astype(x.dtype)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention_fwd(q, k, v, n_heads):
    """Causal multi-head attention over full sequences.

    q,k,v: (B, T, D). Returns (ctx (B,T,D), probs (B,H,T,T)); probs row i
    carries the softmax over keys 0..i and zeros above the diagonal.
    """
    b, t, d = q.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = _split_heads(q, n_heads).astype(np.float64)
    kh = _split_heads(k, n_heads).astype(np.float64)
    vh = _split_heads(v, n_heads).astype(np.float64)
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[:, :, mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ vh
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx.astype(q.dtype), probs.astype(q.dtype)


def attention_bwd(dctx, q, k, v, probs, n_heads):
    """Backward of attention_fwd. Returns (dq, dk, dv), each (B,T,D)."""
    b, t, d = q.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = _split_heads(q, n_heads).astype(np.float64)
    kh = _split_heads(k, n_heads).astype(np.float64)
    vh = _split_heads(v, n_heads).astype(np.float64)
    dctxh = _split_heads(dctx, n_heads).astype(np.float64)
    p = probs.astype(np.float64)
    dv = p.transpose(0, 1, 3, 2) @ dctxh
    dp = dctxh @ vh.transpose(0, 1, 3, 2)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = ds @ kh * scale
    dk = ds.transpose(0, 1, 3, 2) @ qh * scale
    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(b, t, d).astype(q.dtype)
    return merge(dq), merge(dk), merge(dv)


def attend_one(q, k_cache, v_cache, n_heads):
    """Attention for a single query position over `t` cached key/value rows.

    q: (D,), k_cache/v_cache: (t, D). Returns the context vector (D,).
    """
    t, d = k_cache.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(n_heads, dh).astype(np.float64)
    kh = k_cache.reshape(t, n_heads, dh).transpose(1, 0, 2).astype(np.float64)
    vh = v_cache.reshape(t, n_heads, dh).transpose(1, 0, 2).astype(np.float64)
    scores = (kh @ qh[:, :, None])[:, :, 0] * scale
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=1, keepdims=True)
    ctx = (p[:, None, :] @ vh)[:, 0, :]
    return ctx.reshape(d).astype(q.dtype)


def cross_entropy_grad_rows(logits, targets):
    """Fused softmax cross-entropy over rows against integer targets.

    Returns (loss_sum as float, dlogits with d/dlogits of the UN-normalized
    loss sum); callers divide by the row count for a mean loss.
    """
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(s[:, 0])
    rows = np.arange(z.shape[0])
    loss_sum = float((lse - z[rows, targets]).sum())
    p = e / s
    p[rows, targets] -= 1.0
    return loss_sum, p.astype(logits.dtype)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    """In-place Adam update with bias correction; math in float64."""
    g = grad.astype(np.float64)
    m64 = m.astype(np.float64) * beta1 + (1.0 - beta1) * g
    v64 = v.astype(np.float64) * beta2 + (1.0 - beta2) * g * g
    mhat = m64 / (1.0 - beta1 ** t)
    vhat = v64 / (1.0 - beta2 ** t)
    p64 = param.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)
    m[...] = m64.astype(m.dtype)
    v[...] = v64.astype(v.dtype)
    param[...] = p64.astype(param.dtype)


def embedding_grad(tokens, dh, vocab_size):
    """Scatter-add row gradients into an embedding-table gradient."""
    acc = np.zeros((vocab_size, dh.shape[1]), dtype=np.float64)
    np.add.at(acc, tokens, dh.astype(np.float64))
    return acc.astype(dh.dtype)
