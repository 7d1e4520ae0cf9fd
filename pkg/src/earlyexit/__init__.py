"""Early-exit inference for a small decoder-only byte-level transformer.

Pipeline: `model.pretrain` builds a frozen backbone; `heads.init_heads` +
`training.train_heads` fit per-tap exit classifiers against the backbone's
own predictions; `calibration` turns (confidence, correctness) records into
per-head thresholds for a target confidence level; `runtime.generate` skips
remaining blocks whenever a head clears its threshold.

Hot kernels run on numba by default with a pure-numpy fallback; select with
the ``EARLYEXIT_BACKEND`` environment variable ("numba" or "numpy").
"""

from .calibration import (CalibrationRecord, ConfidenceMetric, ThresholdTable,
                          build_threshold_table, collect_calibration,
                          compute_threshold, confidence)
from .config import RunConfig
from .decoding import AttentionCache, FillMode
from .heads import ExitHead, HeadBank, InitMode, head_distribution, head_logits, init_heads
from .kernels import active_backend, available_backends, set_backend
from .mathops import cross_entropy, entropy, layer_norm, matmul, softmax
from .model import Backbone, ForwardTrace, ModelConfig, forward_full, \
    next_token_distribution, pretrain
from .rng import Rng
from .runtime import (ExitDecision, GenerationTrace, agreement_eval, generate,
                      step)
from .training import (TrainLog, TrainSample, TrainSettings, build_batch,
                       head_loss, head_loss_grad, train_heads)
from .weights import load_weights, save_weights

__version__ = "0.1.0"
