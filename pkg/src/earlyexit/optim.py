"""Adam optimizer over named parameter dicts.

One instance owns the moment buffers for a fixed parameter set; `step`
updates parameters in place in dict insertion order, which callers keep
fixed so training is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            kernels.adam_step(p, grads[name], self._m[name], self._v[name],
                              self.t, self.lr, self.beta1, self.beta2, self.eps)
