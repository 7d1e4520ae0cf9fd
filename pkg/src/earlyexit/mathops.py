"""Dense-math primitives and probability utilities.

Conventions used throughout the package:

* matrices / activations are 2-D C-contiguous float32 arrays ("storage is
  float32, reductions accumulate in float64"),
* probability vectors are 1-D float64 arrays on the simplex (entries in
  [0, 1], summing to 1 within 1e-6),
* 0 * log 0 := 0 in entropy, and cross-entropy clamps probabilities at
  1e-12 before the log so saturated heads cannot produce -inf.

The functions here validate their inputs; the jitted kernels in
`earlyexit.kernels` that they wrap do not (the model's inner loops call the
kernels directly).
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError

LOG_PROB_FLOOR = math.log(1e-12)
PROB_SUM_TOL = 1e-6


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float32 array, rejecting non-finite input."""
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ArgumentError(f"{name} contains non-finite entries")
    return a


def validate_prob_vector(p, name: str = "prob vector") -> np.ndarray:
    """Check the simplex invariants and return the vector as float64."""
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ArgumentError(f"{name} must be a non-empty 1-D array")
    if not np.isfinite(v).all():
        raise ArgumentError(f"{name} contains non-finite entries")
    if (v < 0.0).any() or (v > 1.0).any():
        raise ArgumentError(f"{name} has entries outside [0, 1]")
    total = float(v.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ArgumentError(f"{name} sums to {total}, not 1 within {PROB_SUM_TOL}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation and a fixed summation order."""
    am = as_matrix(a, "a")
    bm = as_matrix(b, "b")
    if am.shape[1] != bm.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {am.shape} x {bm.shape} (inner dims differ)"
        )
    return kernels.matmul(am, bm)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax; returns a float64 probability vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ArgumentError(f"softmax needs a non-empty 1-D array, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ArgumentError("softmax input contains non-finite entries")
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy(p) -> float:
    """Shannon entropy -sum p*log(p) in nats, with 0*log(0) = 0."""
    v = validate_prob_vector(p)
    nz = v[v > 0.0]
    return float(-(nz * np.log(nz)).sum())


def cross_entropy(head_logits, teacher) -> float:
    """-sum(teacher * log softmax(head_logits)), stabilized via log-sum-exp."""
    z = np.asarray(head_logits, dtype=np.float64)
    t = validate_prob_vector(teacher, "teacher")
    if z.ndim != 1 or z.shape != t.shape:
        raise DimensionError(
            f"cross_entropy length mismatch: logits {z.shape} vs teacher {t.shape}"
        )
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    logp = np.maximum(z - lse, LOG_PROB_FLOOR)
    return float(-(t * logp).sum())


def layer_norm(x, gain, bias, eps: float) -> np.ndarray:
    """(x - mean) / sqrt(var + eps) * gain + bias over a single vector.

    Variance uses the 1/N normalization. `eps` must be positive except for
    the exact-variance case eps = 0, which is accepted for analysis use.
    """
    xv = np.ascontiguousarray(x, dtype=np.float32)
    gv = np.ascontiguousarray(gain, dtype=np.float32)
    bv = np.ascontiguousarray(bias, dtype=np.float32)
    if xv.ndim != 1 or xv.shape != gv.shape or xv.shape != bv.shape:
        raise DimensionError(
            f"layer_norm length mismatch: x {xv.shape}, gain {gv.shape}, bias {bv.shape}"
        )
    if eps < 0:
        raise ArgumentError(f"eps must be >= 0, got {eps}")
    y, _, _ = kernels.layer_norm_fwd(xv.reshape(1, -1), gv, bv, float(eps))
    return y[0]
