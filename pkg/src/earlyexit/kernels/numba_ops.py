"""Numba @njit twins of the kernels in `numpy_ops`.

Same contracts, same float64 accumulation, but with explicit fixed loop
orders: every output element is the same ascending-index sum on every call,
so results are bit-reproducible run to run. Kernels are compiled lazily for
float32 inputs (the pipeline's storage dtype) and cached on disk.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GELU_C = 0.7978845608028654
GELU_A = 0.044715


@njit(cache=True)
def matmul(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.empty((m, n), a.dtype)
    acc = np.empty(n, np.float64)
    for i in range(m):
        for j in range(n):
            acc[j] = 0.0
        for k in range(kk):
            aik = np.float64(a[i, k])
            for j in range(n):
                acc[j] += aik * np.float64(b[k, j])
        for j in range(n):
            out[i, j] = acc[j]
    return out


@njit(cache=True)
def matmul_tn(a, b):
    kk, m = a.shape
    n = b.shape[1]
    acc = np.zeros((m, n), np.float64)
    for k in range(kk):
        for i in range(m):
            aki = np.float64(a[k, i])
            for j in range(n):
                acc[i, j] += aki * np.float64(b[k, j])
    out = np.empty((m, n), a.dtype)
    for i in range(m):
        for j in range(n):
            out[i, j] = acc[i, j]
    return out


@njit(cache=True)
def matmul_nt(a, b):
    # a @ b.T; b is transposed up front so the inner loop runs contiguous
    # and the per-element accumulation stays ascending in k.
    m, kk = a.shape
    n = b.shape[0]
    bt = np.empty((kk, n), b.dtype)
    for j in range(n):
        for k in range(kk):
            bt[k, j] = b[j, k]
    out = np.empty((m, n), a.dtype)
    acc = np.empty(n, np.float64)
    for i in range(m):
        for j in range(n):
            acc[j] = 0.0
        for k in range(kk):
            aik = np.float64(a[i, k])
            for j in range(n):
                acc[j] += aik * np.float64(bt[k, j])
        for j in range(n):
            out[i, j] = acc[j]
    return out


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty((n, d), x.dtype)
    mean = np.empty(n, x.dtype)
    rstd = np.empty(n, x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += np.float64(x[i, j])
        mu = s / d
        sv = 0.0
        for j in range(d):
            diff = np.float64(x[i, j]) - mu
            sv += diff * diff
        r = 1.0 / math.sqrt(sv / d + eps)
        for j in range(d):
            y[i, j] = (np.float64(x[i, j]) - mu) * r * np.float64(gain[j]) + np.float64(bias[j])
        mean[i] = mu
        rstd[i] = r
    return y, mean, rstd


@njit(cache=True)
def layer_norm_bwd(dy, x, gain, mean, rstd):
    n, d = x.shape
    dx = np.empty((n, d), x.dtype)
    dgain = np.zeros(d, np.float64)
    dbias = np.zeros(d, np.float64)
    xhat = np.empty(d, np.float64)
    dxhat = np.empty(d, np.float64)
    for i in range(n):
        mu = np.float64(mean[i])
        r = np.float64(rstd[i])
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (np.float64(x[i, j]) - mu) * r
            dyv = np.float64(dy[i, j])
            xhat[j] = xh
            dgain[j] += dyv * xh
            dbias[j] += dyv
            dxh = dyv * np.float64(gain[j])
            dxhat[j] = dxh
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = r * (dxhat[j] - m1 - xhat[j] * m2)
    dg = np.empty(d, x.dtype)
    db = np.empty(d, x.dtype)
    for j in range(d):
        dg[j] = dgain[j]
        db[j] = dbias[j]
    return dx, dg, db


@njit(cache=True)
def gelu_fwd(x):
    n, d = x.shape
    y = np.empty((n, d), x.dtype)
    for i in range(n):
        for j in range(d):
            xv = np.float64(x[i, j])
            u = GELU_C * (xv + GELU_A * xv * xv * xv)
            y[i, j] = 0.5 * xv * (1.0 + math.tanh(u))
    return y


@njit(cache=True)
def gelu_bwd(x, dy):
    n, d = x.shape
    dx = np.empty((n, d), x.dtype)
    for i in range(n):
        for j in range(d):
            xv = np.float64(x[i, j])
            u = GELU_C * (xv + GELU_A * xv * xv * xv)
            t = math.tanh(u)
            du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv)
            g = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du
            dx[i, j] = np.float64(dy[i, j]) * g
    return dx


@njit(cache=True)
def attention_fwd(q, k, v, n_heads):
    # Per element, scores sum ascending in the channel and context sums
    # ascending in the key position -- the same order `attend_one` uses, so
    # cached decoding reproduces this bitwise.
    b, t, d = q.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    ctx = np.empty((b, t, d), q.dtype)
    probs = np.zeros((b, n_heads, t, t), q.dtype)
    scores = np.empty(t, np.float64)
    cacc = np.empty(dh, np.float64)
    kt = np.empty((dh, t), np.float64)
    for bi in range(b):
        for h in range(n_heads):
            o = h * dh
            for j in range(t):
                for c in range(dh):
                    kt[c, j] = k[bi, j, o + c]
            for i in range(t):
                for j in range(i + 1):
                    scores[j] = 0.0
                for c in range(dh):
                    qc = np.float64(q[bi, i, o + c])
                    for j in range(i + 1):
                        scores[j] += qc * kt[c, j]
                mx = -1e300
                for j in range(i + 1):
                    s = scores[j] * scale
                    scores[j] = s
                    if s > mx:
                        mx = s
                denom = 0.0
                for j in range(i + 1):
                    e = math.exp(scores[j] - mx)
                    scores[j] = e
                    denom += e
                for c in range(dh):
                    cacc[c] = 0.0
                for j in range(i + 1):
                    pj = scores[j] / denom
                    probs[bi, h, i, j] = pj
                    for c in range(dh):
                        cacc[c] += pj * np.float64(v[bi, j, o + c])
                for c in range(dh):
                    ctx[bi, i, o + c] = cacc[c]
    return ctx, probs


@njit(cache=True)
def attention_bwd(dctx, q, k, v, probs, n_heads):
    b, t, d = q.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    dq = np.zeros((b, t, d), q.dtype)
    dk = np.zeros((b, t, d), q.dtype)
    dv = np.zeros((b, t, d), q.dtype)
    dp = np.empty(t, np.float64)
    ds = np.empty(t, np.float64)
    for bi in range(b):
        for h in range(n_heads):
            o = h * dh
            for i in range(t):
                rowsum = 0.0
                for j in range(i + 1):
                    s = 0.0
                    for c in range(dh):
                        s += np.float64(dctx[bi, i, o + c]) * np.float64(v[bi, j, o + c])
                    dp[j] = s
                    rowsum += s * np.float64(probs[bi, h, i, j])
                for j in range(i + 1):
                    p = np.float64(probs[bi, h, i, j])
                    ds[j] = p * (dp[j] - rowsum)
                for j in range(i + 1):
                    p = np.float64(probs[bi, h, i, j])
                    dsj = ds[j] * scale
                    for c in range(dh):
                        dv[bi, j, o + c] += p * np.float64(dctx[bi, i, o + c])
                        dq[bi, i, o + c] += dsj * np.float64(k[bi, j, o + c])
                        dk[bi, j, o + c] += dsj * np.float64(q[bi, i, o + c])
    return dq, dk, dv


@njit(cache=True)
def attend_one(q, k_cache, v_cache, n_heads):
    t, d = k_cache.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    ctx = np.empty(d, q.dtype)
    scores = np.empty(t, np.float64)
    for h in range(n_heads):
        o = h * dh
        mx = -1e300
        for j in range(t):
            s = 0.0
            for c in range(dh):
                s += np.float64(q[o + c]) * np.float64(k_cache[j, o + c])
            s *= scale
            scores[j] = s
            if s > mx:
                mx = s
        denom = 0.0
        for j in range(t):
            e = math.exp(scores[j] - mx)
            scores[j] = e
            denom += e
        for c in range(dh):
            acc = 0.0
            for j in range(t):
                acc += (scores[j] / denom) * np.float64(v_cache[j, o + c])
            ctx[o + c] = acc
    return ctx


@njit(cache=True)
def cross_entropy_grad_rows(logits, targets):
    n, v = logits.shape
    dlogits = np.empty((n, v), logits.dtype)
    loss_sum = 0.0
    for i in range(n):
        mx = np.float64(logits[i, 0])
        for j in range(1, v):
            zv = np.float64(logits[i, j])
            if zv > mx:
                mx = zv
        s = 0.0
        for j in range(v):
            s += math.exp(np.float64(logits[i, j]) - mx)
        lse = mx + math.log(s)
        loss_sum += lse - np.float64(logits[i, targets[i]])
        for j in range(v):
            p = math.exp(np.float64(logits[i, j]) - lse)
            if j == targets[i]:
                p -= 1.0
            dlogits[i, j] = p
    return loss_sum, dlogits


@njit(cache=True)
def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    flat_p = param.reshape(param.size)
    flat_g = grad.reshape(grad.size)
    flat_m = m.reshape(m.size)
    flat_v = v.reshape(v.size)
    for i in range(flat_p.size):
        g = np.float64(flat_g[i])
        mi = beta1 * np.float64(flat_m[i]) + (1.0 - beta1) * g
        vi = beta2 * np.float64(flat_v[i]) + (1.0 - beta2) * g * g
        flat_m[i] = mi
        flat_v[i] = vi
        flat_p[i] = np.float64(flat_p[i]) - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


@njit(cache=True)
def embedding_grad(tokens, dh, vocab_size):
    n, d = dh.shape
    acc = np.zeros((vocab_size, d), np.float64)
    for i in range(n):
        tok = tokens[i]
        for j in range(d):
            acc[tok, j] += np.float64(dh[i, j])
    out = np.empty((vocab_size, d), dh.dtype)
    for i in range(vocab_size):
        for j in range(d):
            out[i, j] = acc[i, j]
    return out
