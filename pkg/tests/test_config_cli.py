"""RunConfig round trips and the CLI pipeline end to end on a tiny setup."""

import json
import math
import os

import numpy as np
import pytest

from earlyexit.cli import main
from earlyexit.config import RunConfig, load_config
from earlyexit.errors import ValidationError


def tiny_run_config(tmp_path, **model_overrides) -> dict:
    d = RunConfig().to_dict()
    d["model"].update({
        "d_model": 32, "n_layers": 4, "n_attn_heads": 2, "d_ff": 64,
        "max_seq_len": 64, "exit_taps": [1, 2], "seed": 9,
    })
    d["model"].update(model_overrides)
    d["pretrain"].update({"steps": 40, "lr": 2e-3, "batch": 2, "window": 32})
    d["train"].update({"steps": 40, "gen_len": 12, "refresh_every": 20,
                       "context_window": 48,
                       "batch_prompts": ["The river is", "My name is"]})
    d["calib"].update({"gen_len": 16, "prompts": ["The garden", "In Python"]})
    d["eval"].update({"gen_len": 8, "epsilon_grid": [0.5, 0.9],
                      "n_auto_prompts": 4, "auto_prompt_len": 10})
    d["paths"] = {
        "corpus": None,
        "weights": str(tmp_path / "w.brex"),
        "trained_weights": str(tmp_path / "wh.brex"),
        "train_log": str(tmp_path / "log.csv"),
        "records": str(tmp_path / "rec.csv"),
        "thresholds": str(tmp_path / "tau.json"),
        "report": str(tmp_path / "sweep"),
    }
    return d


def write_config(tmp_path, d) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    return str(path)


class TestRunConfig:
    def test_round_trip_equality(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_hash_stable_and_sensitive(self):
        a, b = RunConfig(), RunConfig()
        assert a.hash() == b.hash()
        b.train.lam = 0.77
        assert a.hash() != b.hash()

    def test_validation_lists_problems(self):
        cfg = RunConfig()
        cfg.eval.epsilon_grid = (0.9, 0.5)
        with pytest.raises(ValidationError, match="ascending"):
            cfg.validate()
        cfg.eval.epsilon_grid = ()
        with pytest.raises(ValidationError, match="empty"):
            cfg.validate()

    def test_missing_config_file(self):
        with pytest.raises(ValidationError, match="no/such/file"):
            load_config("no/such/file.json")

    def test_auto_eval_prompts_deterministic(self, corpus):
        cfg = RunConfig()
        p1 = cfg.resolve_eval_prompts(corpus)
        p2 = cfg.resolve_eval_prompts(corpus)
        assert p1 == p2
        assert len(p1) == cfg.eval.n_auto_prompts


class TestCliPipeline:
    def test_full_pipeline(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config(tmp_path))

        assert main(["pretrain", "--config", cfg_path]) == 0
        assert os.path.exists(tmp_path / "w.brex")

        assert main(["train-heads", "--config", cfg_path, "--lambda", "0.5",
                     "--init", "scratch"]) == 0
        assert os.path.exists(tmp_path / "wh.brex")
        assert os.path.exists(tmp_path / "log.csv")

        assert main(["calibrate", "--config", cfg_path]) == 0
        assert os.path.exists(tmp_path / "rec.csv")

        assert main(["thresholds", "--config", cfg_path, "--epsilon", "0.8"]) == 0
        table = json.loads((tmp_path / "tau.json").read_text())
        assert table["epsilon"] == 0.8
        assert len(table["tau"]) == 2
        assert "config_hash" in table

        assert main(["generate", "--config", cfg_path, "--prompt", "The river",
                     "--max-tokens", "12",
                     "--out", str(tmp_path / "trace.json")]) == 0
        trace = json.loads((tmp_path / "trace.json").read_text())
        assert trace["totals"]["tokens"] == 12
        out = capsys.readouterr().out
        assert "The river" in out

        assert main(["sweep", "--config", cfg_path]) == 0
        report = json.loads((tmp_path / "sweep.json").read_text())
        assert [r["epsilon"] for r in report["rows"]] == [0.5, 0.9]
        for row in report["rows"]:
            total = sum(row["exit_fractions"]) + row["final_fraction"]
            assert abs(total - 1.0) < 1e-9
        csv_text = (tmp_path / "sweep.csv").read_text()
        assert csv_text.splitlines()[0] == \
            "epsilon,agreement,speedup,exit_frac_head1,exit_frac_head2,final_frac"

    def test_missing_corpus_is_single_line_error(self, tmp_path, capsys):
        d = tiny_run_config(tmp_path)
        d["paths"]["corpus"] = str(tmp_path / "nowhere.txt")
        cfg_path = write_config(tmp_path, d)
        rc = main(["pretrain", "--config", cfg_path])
        assert rc != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: data:")
        assert "nowhere.txt" in err
        assert "\n" not in err

    def test_invalid_lambda_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config(tmp_path))
        rc = main(["train-heads", "--config", cfg_path, "--lambda", "1.5"])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error: validation")

    def test_pretrain_deterministic_bytes(self, tmp_path):
        d = tiny_run_config(tmp_path)
        d["pretrain"]["steps"] = 10
        cfg_path = write_config(tmp_path, d)
        assert main(["pretrain", "--config", cfg_path]) == 0
        first = (tmp_path / "w.brex").read_bytes()
        assert main(["pretrain", "--config", cfg_path]) == 0
        assert (tmp_path / "w.brex").read_bytes() == first

    def test_weight_header_records_lambda_and_init(self, tmp_path):
        d = tiny_run_config(tmp_path)
        d["pretrain"]["steps"] = 10
        d["train"]["steps"] = 5
        cfg_path = write_config(tmp_path, d)
        main(["pretrain", "--config", cfg_path])
        main(["train-heads", "--config", cfg_path, "--lambda", "0.95",
              "--init", "copied"])
        from earlyexit.weights import load_weights

        _, bank, header = load_weights(tmp_path / "wh.brex")
        assert header["heads"]["lambda"] == 0.95
        assert header["heads"]["init_mode"] == "copied"
        assert bank.init_mode.value == "copied"

    def test_degenerate_sweep_all_incorrect_records(self, tmp_path, capsys):
        d = tiny_run_config(tmp_path)
        d["pretrain"]["steps"] = 10
        d["train"]["steps"] = 5
        d["eval"]["epsilon_grid"] = [1.0]
        cfg_path = write_config(tmp_path, d)
        main(["pretrain", "--config", cfg_path])
        main(["train-heads", "--config", cfg_path])
        # calibration set where no value can reach eps=1.0 on any head
        lines = ["head_index,score,correct"]
        rng = np.random.default_rng(3)
        for k in range(2):
            for s in rng.random(30):
                lines.append(f"{k},{s},0")
        (tmp_path / "rec.csv").write_text("\n".join(lines) + "\n")
        assert main(["sweep", "--config", cfg_path]) == 0
        report = json.loads((tmp_path / "sweep.json").read_text())
        row = report["rows"][0]
        assert row["tau"] == ["inf", "inf"]
        assert row["agreement"] == 1.0
        assert row["speedup"] == 1.0
        assert row["final_fraction"] == 1.0

    def test_thresholds_missing_records(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config(tmp_path))
        rc = main(["thresholds", "--config", cfg_path, "--epsilon", "0.5"])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error: io")


def test_console_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "earlyexit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pretrain" in proc.stdout and "sweep" in proc.stdout
