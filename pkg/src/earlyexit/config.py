"""Run configuration: one JSON document drives the whole pipeline.

Defaults encode the bundled desk-scale setup (byte-level model on the
packaged corpus, the stock training and calibration prompt sets, and the
epsilon grid the sweep reports over). CLI flags override individual fields.
The canonical-JSON hash of the config is embedded in every output artifact.
"""

from __future__ import annotations

import importlib.resources
import os
from dataclasses import dataclass, field

from .calibration import ConfidenceMetric
from .errors import ValidationError
from .ioutil import canonical_json, config_hash
from .model import ModelConfig
from .rng import Rng
from .training import DEFAULT_TRAIN_PROMPTS, TrainSettings

FORMAT_VERSION = 1

DEFAULT_CALIB_PROMPTS = (
    "A cat is",
    "In Python, a list is",
    "In C, we can define a function",
    "The capital of France is",
    "The derivative of $x^2$ is",
)

DEFAULT_EPSILON_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


def bundled_corpus_path() -> str:
    return str(importlib.resources.files("earlyexit").joinpath("data/corpus.txt"))


@dataclass
class PretrainSettings:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 4
    window: int = 128

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "batch": self.batch,
                "window": self.window}

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainSettings":
        return cls(**d)


@dataclass
class CalibSettings:
    prompts: tuple[str, ...] = DEFAULT_CALIB_PROMPTS
    gen_len: int = 64
    metric: ConfidenceMetric = ConfidenceMetric.BREAKING_TIES

    def to_dict(self) -> dict:
        return {"prompts": list(self.prompts), "gen_len": self.gen_len,
                "metric": self.metric.value}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibSettings":
        return cls(prompts=tuple(d["prompts"]), gen_len=int(d["gen_len"]),
                   metric=ConfidenceMetric(d["metric"]))


@dataclass
class EvalSettings:
    prompts: tuple[str, ...] | None = None  # None: slice prompts from the corpus
    gen_len: int = 32
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILON_GRID
    n_auto_prompts: int = 64
    auto_prompt_len: int = 24

    def to_dict(self) -> dict:
        return {
            "prompts": None if self.prompts is None else list(self.prompts),
            "gen_len": self.gen_len,
            "epsilon_grid": list(self.epsilon_grid),
            "n_auto_prompts": self.n_auto_prompts,
            "auto_prompt_len": self.auto_prompt_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSettings":
        prompts = d.get("prompts")
        return cls(
            prompts=None if prompts is None else tuple(prompts),
            gen_len=int(d["gen_len"]),
            epsilon_grid=tuple(float(e) for e in d["epsilon_grid"]),
            n_auto_prompts=int(d.get("n_auto_prompts", 64)),
            auto_prompt_len=int(d.get("auto_prompt_len", 24)),
        )


@dataclass
class Paths:
    corpus: str | None = None  # None: the corpus bundled with the package
    weights: str = "weights.brex"
    trained_weights: str = "weights-heads.brex"
    train_log: str = "train_log.csv"
    records: str = "calibration.csv"
    thresholds: str = "thresholds.json"
    report: str = "sweep"

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus, "weights": self.weights,
            "trained_weights": self.trained_weights, "train_log": self.train_log,
            "records": self.records, "thresholds": self.thresholds,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Paths":
        return cls(**d)

    def corpus_path(self) -> str:
        return self.corpus if self.corpus is not None else bundled_corpus_path()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    calib: CalibSettings = field(default_factory=CalibSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> None:
        problems = []
        grid = self.eval.epsilon_grid
        if not grid:
            problems.append("epsilon_grid is empty")
        if any(not 0.0 <= e <= 1.0 for e in grid):
            problems.append(f"epsilon_grid {grid} has entries outside [0, 1]")
        if list(grid) != sorted(grid):
            problems.append(f"epsilon_grid {grid} is not ascending")
        if self.calib.gen_len < 1:
            problems.append("calib.gen_len must be >= 1")
        if self.eval.gen_len < 1:
            problems.append("eval.gen_len must be >= 1")
        if self.pretrain.steps < 1:
            problems.append("pretrain.steps must be >= 1")
        try:
            self.train.validate()
        except Exception as exc:
            problems.append(str(exc))
        if problems:
            raise ValidationError("invalid run config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "train": {
                "lambda": self.train.lam,
                "lr": self.train.lr,
                "steps": self.train.steps,
                "batch_prompts": list(self.train.batch_prompts),
                "gen_len": self.train.gen_len,
                "seed": self.train.seed,
                "refresh_every": self.train.refresh_every,
                "context_window": self.train.context_window,
                "temperature": self.train.temperature,
            },
            "calib": self.calib.to_dict(),
            "eval": self.eval.to_dict(),
            "paths": self.paths.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        out = cls()
        if "model" in d:
            out.model = ModelConfig.from_dict(d["model"])
        if "pretrain" in d:
            out.pretrain = PretrainSettings.from_dict(d["pretrain"])
        if "train" in d:
            t = d["train"]
            out.train = TrainSettings(
                lam=float(t.get("lambda", 0.1)),
                lr=float(t.get("lr", 1e-3)),
                steps=int(t.get("steps", 2000)),
                batch_prompts=tuple(t.get("batch_prompts", DEFAULT_TRAIN_PROMPTS)),
                gen_len=int(t.get("gen_len", 64)),
                seed=int(t.get("seed", 42)),
                refresh_every=int(t.get("refresh_every", 250)),
                context_window=int(t.get("context_window", 128)),
                temperature=float(t.get("temperature", 0.0)),
            )
        if "calib" in d:
            out.calib = CalibSettings.from_dict(d["calib"])
        if "eval" in d:
            out.eval = EvalSettings.from_dict(d["eval"])
        if "paths" in d:
            out.paths = Paths.from_dict(d["paths"])
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def resolve_eval_prompts(self, corpus: bytes) -> list[str]:
        """The evaluation prompt set: explicit, or deterministic corpus slices."""
        if self.eval.prompts is not None:
            return list(self.eval.prompts)
        rng = Rng(self.model.seed).child(2)
        length = self.eval.auto_prompt_len
        n_starts = max(1, len(corpus) - length)
        prompts = []
        for _ in range(self.eval.n_auto_prompts):
            start = rng.below(n_starts)
            prompts.append(corpus[start:start + length].decode("utf-8", "replace"))
        return prompts


def load_config(path: str | None) -> RunConfig:
    """Config file (JSON) or all defaults when `path` is None."""
    import json

    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))
