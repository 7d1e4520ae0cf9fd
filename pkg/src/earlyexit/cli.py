"""Command-line pipeline: pretrain -> train-heads -> calibrate -> thresholds
-> generate / sweep.

Every command takes --config (JSON, defaults apply when omitted) plus
targeted overrides, writes its artifacts atomically with the config hash and
format version embedded, and exits nonzero with a single-line
``error: <kind>: <message>`` on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time

import numpy as np

from .calibration import (ConfidenceMetric, build_threshold_table, check_guarantee,
                          collect_calibration, read_records_csv,
                          read_records_metric, ThresholdTable, write_records_csv)
from .config import FORMAT_VERSION, RunConfig, load_config
from .decoding import FillMode, decode_tokens
from .errors import DataError, EarlyExitError, ValidationError
from .heads import InitMode, init_heads
from .ioutil import atomic_write_text, canonical_json
from .model import pretrain as pretrain_model
from .runtime import agreement_eval, generate
from .training import train_heads
from .weights import load_weights, save_weights

log = logging.getLogger("earlyexit")


def _read_corpus(cfg: RunConfig) -> bytes:
    path = cfg.paths.corpus_path()
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus at {path}: {exc.strerror}") from exc


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.model = type(cfg.model).from_dict({**cfg.model.to_dict(), "seed": args.seed})
        cfg.train.seed = args.seed
    if getattr(args, "lam", None) is not None:
        cfg.train.lam = args.lam
    if getattr(args, "metric", None) is not None:
        cfg.calib.metric = ConfidenceMetric(args.metric)
    if getattr(args, "epsilon_grid", None) is not None:
        grid = tuple(float(x) for x in args.epsilon_grid.split(","))
        cfg.eval.epsilon_grid = grid
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    corpus = _read_corpus(cfg)
    t0 = time.perf_counter()
    model, losses = pretrain_model(corpus, cfg.model, cfg.pretrain.steps,
                                   cfg.pretrain.lr, cfg.pretrain.batch,
                                   window=cfg.pretrain.window)
    out = args.out or cfg.paths.weights
    save_weights(out, model, config_hash=cfg.hash())
    print(f"pretrained {model.num_params()} params for {len(losses)} steps "
          f"in {time.perf_counter() - t0:.1f}s")
    print(f"final loss {losses[-1]:.4f} (step 1: {losses[0]:.4f})")
    print(f"weights written to {out}")
    return 0


def cmd_train_heads(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    model, _, _ = load_weights(args.weights or cfg.paths.weights)
    init_mode = InitMode.COPIED if args.init == "copied" else InitMode.SCRATCH
    from .rng import Rng

    bank = init_heads(model, init_mode, Rng(cfg.train.seed).child(3))
    before = model.fingerprint()
    t0 = time.perf_counter()
    bank, train_log = train_heads(model, bank, cfg.train)
    assert model.fingerprint() == before, "backbone changed during head training"
    out = args.out or cfg.paths.trained_weights
    save_weights(out, model, bank, lam=cfg.train.lam, config_hash=cfg.hash())
    train_log.write_csv(cfg.paths.train_log, config_hash=cfg.hash(),
                        format_version=FORMAT_VERSION, init=init_mode.value,
                        **{"lambda": cfg.train.lam})
    last = train_log.last_step()
    print(f"trained {len(bank)} heads (lambda={cfg.train.lam}, init={init_mode.value}) "
          f"for {cfg.train.steps} steps in {time.perf_counter() - t0:.1f}s")
    print(f"final mean accuracy {train_log.step_mean(last, 'accuracy'):.3f}, "
          f"mean entropy {train_log.step_mean(last, 'entropy'):.3f} nats")
    print(f"weights written to {out}; log written to {cfg.paths.train_log}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    model, bank, _ = load_weights(args.weights or cfg.paths.trained_weights)
    if bank is None:
        raise DataError("weight file has no exit heads; run train-heads first")
    records = collect_calibration(model, bank, list(cfg.calib.prompts),
                                  cfg.calib.gen_len, cfg.calib.metric)
    out = args.out or cfg.paths.records
    write_records_csv(out, records, config_hash=cfg.hash(),
                      format_version=FORMAT_VERSION, metric=cfg.calib.metric.value)
    per_head = {}
    for r in records:
        per_head.setdefault(r.head_index, []).append(r.correct)
    for k in sorted(per_head):
        frac = float(np.mean(per_head[k]))
        print(f"head {k}: {len(per_head[k])} records, correctness {frac:.3f}")
    print(f"{len(records)} records written to {out}")
    return 0


def cmd_thresholds(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    records_path = args.records or cfg.paths.records
    records = read_records_csv(records_path)
    metric = read_records_metric(records_path) or cfg.calib.metric
    n_heads = len(cfg.model.exit_taps)
    table = build_threshold_table(records, args.epsilon, metric, n_heads)
    checks = check_guarantee(records, table)
    for c in checks:
        if c["correctness"] is None:
            print(f"head {c['head']}: tau=inf (never exits)")
            continue
        ok = c["correctness"] >= table.epsilon
        print(f"head {c['head']}: tau={c['tau']:.6g} "
              f"correctness@tau={c['correctness']:.4f} "
              f"(n={c['n_at_or_above']}) {'ok' if ok else 'VIOLATION'}")
        if not ok:
            raise DataError(
                f"calibration guarantee violated at head {c['head']}: "
                f"{c['correctness']:.4f} < {table.epsilon}"
            )
    out = args.out or cfg.paths.thresholds
    atomic_write_text(out, json.dumps(table.to_json_dict(
        config_hash=cfg.hash(), format_version=FORMAT_VERSION), indent=2) + "\n")
    print(f"thresholds written to {out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    model, bank, _ = load_weights(args.weights or cfg.paths.trained_weights)
    if bank is None:
        raise DataError("weight file has no exit heads; run train-heads first")
    with open(args.thresholds or cfg.paths.thresholds, "r", encoding="utf-8") as fh:
        table = ThresholdTable.from_json_dict(json.load(fh))
    t0 = time.perf_counter()
    trace = generate(model, bank, table, args.prompt, args.max_tokens,
                     FillMode(args.fill_mode))
    wall = time.perf_counter() - t0
    text = decode_tokens(trace.tokens)
    print(args.prompt + text)
    print(f"-- speedup {trace.speedup:.3f}x (blocks {trace.blocks_executed}/"
          f"{trace.baseline_blocks}), exits per head {trace.per_head_exits}, "
          f"final {trace.final_exits}, kv fills {trace.kv_fills}, "
          f"{wall:.2f}s wall", file=sys.stderr)
    if args.out:
        atomic_write_text(args.out, json.dumps(trace.to_json_dict(
            prompt=args.prompt, epsilon=table.epsilon, metric=table.metric.value,
            config_hash=cfg.hash(), format_version=FORMAT_VERSION), indent=2) + "\n")
        print(f"trace written to {args.out}", file=sys.stderr)
    return 0


def run_sweep(cfg: RunConfig, model, bank, records, eval_prompts: list[str]) -> dict:
    """Threshold + agreement evaluation at every epsilon in the grid."""
    n_heads = len(cfg.model.exit_taps)
    rows = []
    for eps in cfg.eval.epsilon_grid:
        table = build_threshold_table(records, eps, cfg.calib.metric, n_heads)
        checks = check_guarantee(records, table)
        for c in checks:
            if c["correctness"] is not None and c["correctness"] < eps:
                raise DataError(f"guarantee violated at eps={eps}, head {c['head']}")
        report = agreement_eval(model, bank, table, eval_prompts, cfg.eval.gen_len)
        taps = cfg.model.exit_taps
        mean_depth = sum(
            h["exit_fraction"] * taps[i] for i, h in enumerate(report["per_head"])
        ) + report["final"]["exit_fraction"] * cfg.model.n_layers
        rows.append({
            "epsilon": eps,
            "agreement": report["agreement"],
            "speedup": report["speedup"],
            "exit_fractions": [h["exit_fraction"] for h in report["per_head"]],
            "final_fraction": report["final"]["exit_fraction"],
            "per_head_precision": [h["precision"] for h in report["per_head"]],
            "mean_blocks_per_token": report["mean_blocks_per_token"],
            "mean_exit_depth": mean_depth,
            "tau": ["inf" if math.isinf(t) else t for t in table.tau],
        })
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.model.seed,
        "metric": cfg.calib.metric.value,
        "eval_tokens_per_epsilon": len(eval_prompts) * cfg.eval.gen_len,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "rows": rows,
    }


def sweep_curves_csv(report: dict, n_heads: int) -> str:
    header = ["epsilon", "agreement", "speedup"]
    header += [f"exit_frac_head{i + 1}" for i in range(n_heads)]
    header.append("final_frac")
    lines = [",".join(header)]
    for row in report["rows"]:
        vals = [row["epsilon"], row["agreement"], row["speedup"],
                *row["exit_fractions"], row["final_fraction"]]
        lines.append(",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    model, bank, _ = load_weights(args.weights or cfg.paths.trained_weights)
    if bank is None:
        raise DataError("weight file has no exit heads; run train-heads first")
    records_path = args.records or cfg.paths.records
    try:
        records = read_records_csv(records_path)
        recorded = read_records_metric(records_path)
        if recorded is not None:
            cfg.calib.metric = recorded
    except OSError:
        print("no calibration records found; collecting now")
        records = collect_calibration(model, bank, list(cfg.calib.prompts),
                                      cfg.calib.gen_len, cfg.calib.metric)
        write_records_csv(records_path, records,
                          config_hash=cfg.hash(), format_version=FORMAT_VERSION,
                          metric=cfg.calib.metric.value)
    eval_prompts = cfg.resolve_eval_prompts(_read_corpus(cfg))
    t0 = time.perf_counter()
    report = run_sweep(cfg, model, bank, records, eval_prompts)
    out_json = (args.out or cfg.paths.report) + ".json"
    out_csv = (args.out or cfg.paths.report) + ".csv"
    atomic_write_text(out_json, json.dumps(report, indent=2) + "\n")
    atomic_write_text(out_csv, sweep_curves_csv(report, len(cfg.model.exit_taps)))
    for row in report["rows"]:
        print(f"eps={row['epsilon']:<5} agreement={row['agreement']:.4f} "
              f"speedup={row['speedup']:.3f} depth={row['mean_exit_depth']:.2f}")
    print(f"sweep of {len(report['rows'])} epsilon values in "
          f"{time.perf_counter() - t0:.1f}s -> {out_json}, {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="earlyexit",
        description="Early-exit transformer pipeline: pretrain a byte-level "
                    "backbone, self-train exit heads, calibrate thresholds, "
                    "and generate or sweep.",
    )
    p.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=False):
        sp.add_argument("--config", default=None, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override seeds")
        sp.add_argument("--out", default=None, help="override output path")
        if weights:
            sp.add_argument("--weights", default=None, help="weight file to read")

    sp = sub.add_parser("pretrain", help="train the backbone on the corpus")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train-heads", help="self-train exit heads")
    common(sp, weights=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="entropy-penalty weight in [0, 1]")
    sp.add_argument("--init", choices=["scratch", "copied"], default="scratch")
    sp.set_defaults(func=cmd_train_heads)

    sp = sub.add_parser("calibrate", help="collect per-head (score, correct) records")
    common(sp, weights=True)
    sp.add_argument("--metric", choices=[m.value for m in ConfidenceMetric],
                    default=None)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("thresholds", help="derive per-head thresholds at one epsilon")
    common(sp)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--records", default=None, help="records CSV to read")
    sp.set_defaults(func=cmd_thresholds)

    sp = sub.add_parser("generate", help="early-exit generation from a prompt")
    common(sp, weights=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-tokens", type=int, default=64)
    sp.add_argument("--thresholds", default=None, help="thresholds JSON to read")
    sp.add_argument("--fill-mode", choices=[m.value for m in FillMode],
                    default=FillMode.STATE_COPY.value)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("sweep", help="agreement/speedup curves over the epsilon grid")
    common(sp, weights=True)
    sp.add_argument("--records", default=None, help="records CSV to read")
    sp.add_argument("--epsilon-grid", default=None, help="comma-separated values")
    sp.add_argument("--metric", choices=[m.value for m in ConfidenceMetric],
                    default=None)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except EarlyExitError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
