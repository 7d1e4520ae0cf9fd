"""Confidence metrics, calibration collection, and per-head exit thresholds.

Calibration runs the backbone greedily over a prompt set and records, for
every generated position and every head, a confidence score plus whether the
head's argmax matched the backbone's. The threshold for a head at confidence
level epsilon is the lowest score value such that, among all calibration
records of that head scoring at or above it, the fraction of correct
predictions is at least epsilon. Scanning candidate values (rather than raw
sorted indices) keeps that guarantee exact even when scores repeat: a
threshold never lands mid-way through a run of equal scores.

A head with no qualifying value gets tau = +inf and simply never exits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .decoding import encode_text, generate_tokens
from .errors import ArgumentError, DataError
from .heads import HeadBank, head_distribution
from .mathops import entropy, validate_prob_vector
from .model import Backbone


class ConfidenceMetric(str, Enum):
    BREAKING_TIES = "breaking-ties"
    MAX_PROB = "max-prob"
    NEG_ENTROPY = "entropy"


def confidence(metric: ConfidenceMetric | str, p) -> float:
    """Scalar confidence of a probability vector; higher always means surer.

    breaking-ties: top1 - top2 (in [0, 1]);
    max-prob: top1 (in [1/V, 1]);
    entropy: negated Shannon entropy (in [-ln V, 0]).
    """
    metric = ConfidenceMetric(metric)
    v = validate_prob_vector(p)
    if metric is ConfidenceMetric.BREAKING_TIES:
        if v.size < 2:
            raise ArgumentError("breaking-ties needs a vocabulary of at least 2")
        top2 = np.partition(v, -2)[-2:]
        return float(top2[1] - top2[0])
    if metric is ConfidenceMetric.MAX_PROB:
        return float(v.max())
    return -entropy(v)


@dataclass
class CalibrationRecord:
    head_index: int
    score: float
    correct: bool


def collect_calibration(model: Backbone, bank: HeadBank, prompts: list[str],
                        gen_len: int, metric: ConfidenceMetric | str
                        ) -> list[CalibrationRecord]:
    """Greedy generation from each prompt, scoring every head at every step.

    Correctness of a head's record is argmax agreement with the backbone's
    own next-token choice at that position. Emits one record per (generated
    token, head), position-major.
    """
    metric = ConfidenceMetric(metric)
    if not prompts:
        raise ArgumentError("calibration needs at least one prompt")
    records: list[CalibrationRecord] = []
    for prompt in prompts:
        toks = encode_text(prompt)
        _, steps = generate_tokens(model, toks, gen_len, record=True)
        for step in steps:
            teacher_tok = int(np.argmax(step.final_logits))
            for ki, head in enumerate(bank):
                p = head_distribution(head, step.tap_hiddens[head.tap_index])
                records.append(CalibrationRecord(
                    head_index=ki,
                    score=confidence(metric, p),
                    correct=int(np.argmax(p)) == teacher_tok,
                ))
    return records


def compute_threshold(records_k: list[CalibrationRecord], epsilon: float) -> float:
    """Lowest score value whose at-or-above calibration set is >= epsilon
    correct; +inf when no value qualifies (the head then never exits).

    Records are sorted ascending by score (stable, so equal scores keep
    collection order) and candidate values are scanned from the bottom.
    """
    if not records_k:
        raise ArgumentError("compute_threshold needs at least one record")
    if not 0.0 <= epsilon <= 1.0:
        raise ArgumentError(f"epsilon must be in [0, 1], got {epsilon}")
    scores = np.array([r.score for r in records_k], dtype=np.float64)
    correct = np.array([r.correct for r in records_k], dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    c = correct[order]
    n = s.size
    suffix = np.cumsum(c[::-1])[::-1]
    for j in range(n):
        if j > 0 and s[j] == s[j - 1]:
            continue  # not the first of a run of equal scores
        if suffix[j] / (n - j) >= epsilon:
            return float(s[j])
    return math.inf


@dataclass
class ThresholdTable:
    """Per-head exit thresholds for one (epsilon, metric) setting."""

    epsilon: float
    metric: ConfidenceMetric
    tau: list[float]
    calib_size: int

    def to_json_dict(self, **metadata) -> dict:
        d = {
            "epsilon": self.epsilon,
            "metric": self.metric.value,
            "calib_size": self.calib_size,
            "tau": ["inf" if math.isinf(t) else t for t in self.tau],
        }
        d.update(metadata)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ThresholdTable":
        return cls(
            epsilon=float(d["epsilon"]),
            metric=ConfidenceMetric(d["metric"]),
            tau=[math.inf if t == "inf" else float(t) for t in d["tau"]],
            calib_size=int(d["calib_size"]),
        )


def build_threshold_table(records: list[CalibrationRecord], epsilon: float,
                          metric: ConfidenceMetric | str, n_heads: int) -> ThresholdTable:
    """Per-head `compute_threshold` over grouped records."""
    metric = ConfidenceMetric(metric)
    groups: dict[int, list[CalibrationRecord]] = {k: [] for k in range(n_heads)}
    for r in records:
        if r.head_index not in groups:
            raise DataError(f"record for head {r.head_index} outside 0..{n_heads - 1}")
        groups[r.head_index].append(r)
    missing = [k for k, g in groups.items() if not g]
    if missing:
        raise DataError(f"no calibration records for heads {missing}")
    tau = [compute_threshold(groups[k], epsilon) for k in range(n_heads)]
    return ThresholdTable(epsilon=float(epsilon), metric=metric, tau=tau,
                          calib_size=len(records))


def check_guarantee(records: list[CalibrationRecord], table: ThresholdTable
                    ) -> list[dict]:
    """Empirical correctness among records scoring >= tau, per head.

    For every finite tau this fraction is >= epsilon by construction; callers
    (the thresholds command, the acceptance suite) assert it.
    """
    out = []
    for k, t in enumerate(table.tau):
        if math.isinf(t):
            out.append({"head": k, "tau": "inf", "n_at_or_above": 0, "correctness": None})
            continue
        hits = [r for r in records if r.head_index == k and r.score >= t]
        frac = sum(r.correct for r in hits) / len(hits)
        out.append({"head": k, "tau": t, "n_at_or_above": len(hits), "correctness": frac})
    return out


def write_records_csv(path, records: list[CalibrationRecord], **metadata) -> None:
    """CSV persistence: header comment with metadata, then head,score,correct."""
    from .ioutil import atomic_write_text

    lines = []
    if metadata:
        meta = " ".join(f"{k}={v}" for k, v in sorted(metadata.items()))
        lines.append(f"# {meta}")
    lines.append("head_index,score,correct")
    for r in records:
        lines.append(f"{r.head_index},{r.score!r},{int(r.correct)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_records_csv(path) -> list[CalibrationRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(rows):
        records.append(CalibrationRecord(
            head_index=int(row["head_index"]),
            score=float(row["score"]),
            correct=bool(int(row["correct"])),
        ))
    return records


def read_records_metric(path) -> ConfidenceMetric | None:
    """Metric recorded in the CSV's metadata comment, when present."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return None
    for token in first[1:].split():
        if token.startswith("metric="):
            return ConfidenceMetric(token.split("=", 1)[1])
    return None
