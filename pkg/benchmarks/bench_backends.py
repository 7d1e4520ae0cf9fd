"""Benchmark the numba kernels against the pure-numpy fallback.

Times the individual hot kernels at pipeline shapes plus two end-to-end
slices (a pretraining step and cached token generation), switching backends
in-process. Run from the repo root:

    python benchmarks/bench_backends.py [--steps N]

The numba backend exists for its fixed, documented summation order (bitwise
run-to-run reproducibility); the numpy path leans on BLAS, which is usually
faster on the large matmuls but makes no ordering promise. The table shows
what that guarantee costs on this machine.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from earlyexit import kernels
from earlyexit.decoding import encode_text, generate_tokens
from earlyexit.model import Backbone, ModelConfig, loss_and_grads
from earlyexit.rng import Rng

BACKENDS = ("numba", "numpy")


def timeit(fn, repeats):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def kernel_cases(rng):
    r32 = lambda *s: rng.standard_normal(s).astype(np.float32)
    a, b = r32(512, 128), r32(128, 512)
    at = r32(512, 512)
    q = r32(4, 128, 128)
    x = r32(512, 512)
    g, bias = r32(128), r32(128)
    xn = r32(512, 128)
    logits, targets = r32(512, 256), rng.integers(0, 256, 512).astype(np.int64)
    kcache = r32(128, 128)
    return [
        ("matmul 512x128x512", lambda: kernels.matmul(a, b), 20),
        ("matmul_tn 512x512 -> 512x128", lambda: kernels.matmul_tn(at, xn), 20),
        ("matmul_nt 512x512 @ .T", lambda: kernels.matmul_nt(at, at), 10),
        ("attention fwd B4 T128 D128", lambda: kernels.attention_fwd(q, q, q, 4), 10),
        ("layer_norm fwd 512x128", lambda: kernels.layer_norm_fwd(xn, g, bias, 1e-5), 50),
        ("gelu fwd 512x512", lambda: kernels.gelu_fwd(x), 20),
        ("cross_entropy 512x256", lambda: kernels.cross_entropy_grad_rows(logits, targets), 20),
        ("attend_one t=128 D128", lambda: kernels.attend_one(xn[0], kcache, kcache, 4), 200),
    ]


def end_to_end_cases(steps):
    cfg = ModelConfig()
    model = Backbone.init_random(cfg, Rng(1))
    rng = np.random.default_rng(2)
    inputs = rng.integers(0, 256, (4, 128)).astype(np.int64)
    prompt = encode_text("The capital of France is")
    return [
        ("pretrain step (B4 T128)", lambda: loss_and_grads(model, inputs, inputs), max(1, steps // 4)),
        ("generate 32 tokens (cached)", lambda: generate_tokens(model, prompt, 32), max(1, steps // 4)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=8, help="repeats for slow cases")
    args = parser.parse_args()

    rng = np.random.default_rng(7)
    cases = kernel_cases(rng) + end_to_end_cases(args.steps)
    results = {}
    for backend in BACKENDS:
        if backend not in kernels.available_backends():
            print(f"backend {backend} unavailable, skipping")
            continue
        kernels.set_backend(backend)
        for name, fn, repeats in cases:
            results.setdefault(name, {})[backend] = timeit(fn, repeats)

    width = max(len(n) for n in results)
    print(f"\n{'case':<{width}}  {'numba':>10}  {'numpy':>10}  numba/numpy")
    for name, times in results.items():
        nb = times.get("numba", float("nan"))
        npy = times.get("numpy", float("nan"))
        print(f"{name:<{width}}  {nb * 1e3:>8.2f}ms  {npy * 1e3:>8.2f}ms  {nb / npy:>10.2f}x")

    # sanity: both backends agree on a shared workload
    kernels.set_backend("numba")
    a = rng.standard_normal((64, 48)).astype(np.float32)
    b = rng.standard_normal((48, 32)).astype(np.float32)
    nbm = kernels.matmul(a, b)
    kernels.set_backend("numpy")
    npm = kernels.matmul(a, b)
    print(f"\ncross-backend max |diff| on shared matmul: {np.abs(nbm - npm).max():.2e}")


if __name__ == "__main__":
    main()
