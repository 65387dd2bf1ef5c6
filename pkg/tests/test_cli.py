import json

import pytest

from shrinklm.cli import main

MINI = {
    "d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 96,
    "steps": 80, "batch_size": 4, "train_seq_len": 48,
    "calib_sequences": 8, "calib_length": 48,
    "horizon": 10, "prompt_len": 10, "n_prompts": 2,
    "eval_seq_len": 48, "eval_max_windows": 4,
    "target_rate": 0.15,
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg = dict(MINI, out_dir=str(root / "run"))
    cfg_path.write_text(json.dumps(cfg))
    for cmd in ("train", "calibrate", "allocate", "compress", "schedule-search",
                "generate", "eval"):
        assert main([cmd, "--config", str(cfg_path)]) == 0, cmd
    return root


class TestPipeline:
    def test_artifacts_exist(self, run_dir):
        run = run_dir / "run"
        for name in ("model.tlmc", "grads.tlmc", "importance.json", "allocation.json",
                     "compressed.tlmc", "decode_model.tlmc", "schedule.json",
                     "schedule_scores.json", "generation.txt", "trace.csv",
                     "eval_report.json", "eval_report.txt"):
            assert (run / name).exists(), name

    def test_eval_report_schema(self, run_dir):
        doc = json.loads((run_dir / "run" / "eval_report.json").read_text())
        assert "config_hash" in doc
        rep = doc["report"]
        assert rep["perplexity"] >= 1.0
        assert 0.0 <= rep["rouge_l"]["f"] <= 100.0
        assert {r["name"] for r in doc["throughput_rows"]} == {
            "dense", "static_compressed", "progressive"}

    def test_artifacts_embed_config_hash(self, run_dir):
        alloc = json.loads((run_dir / "run" / "allocation.json").read_text())
        sched = json.loads((run_dir / "run" / "schedule.json").read_text())
        assert alloc["config_hash"] == sched["config_hash"]
        assert len(alloc["config_hash"]) == 16

    def test_trace_csv_header(self, run_dir):
        lines = (run_dir / "run" / "trace.csv").read_text().strip().split("\n")
        assert lines[0] == "token_index,budget,params_used"
        assert len(lines) == 1 + MINI["horizon"]

    def test_rerun_allocate_is_bit_identical(self, run_dir):
        cfg_path = run_dir / "cfg.json"
        alloc_path = run_dir / "run" / "allocation.json"
        before = alloc_path.read_bytes()
        assert main(["allocate", "--config", str(cfg_path)]) == 0
        assert alloc_path.read_bytes() == before

    def test_bench_and_ablate(self, run_dir):
        cfg_path = run_dir / "cfg.json"
        assert main(["bench", "--config", str(cfg_path)]) == 0
        assert main(["ablate", "--config", str(cfg_path)]) == 0
        bench = (run_dir / "run" / "bench.csv").read_text()
        assert "search_ratio" in bench
        ab = json.loads((run_dir / "run" / "ablation.json").read_text())
        assert set(ab["rows"]) == {
            "whitening_only", "plus_guided_allocation", "plus_progressive_decode"}


class TestValidation:
    def test_weight_only_allocate_needs_no_grads(self, tmp_path):
        cfg = dict(MINI, out_dir=str(tmp_path / "run"), steps=30, metric="weight_only")
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p)]) == 0
        assert main(["allocate", "--config", str(p)]) == 0

    def test_fisher_allocate_without_calibrate_fails(self, tmp_path, capsys):
        cfg = dict(MINI, out_dir=str(tmp_path / "run"), steps=30)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p)]) == 0
        assert main(["allocate", "--config", str(p)]) == 2
        err = capsys.readouterr().err
        assert "grads.tlmc" in err and "calibrate" in err

    def test_unknown_config_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"no_such_key": 1}))
        assert main(["train", "--config", str(p)]) == 2

    def test_bad_target_rate_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(dict(MINI, out_dir=str(tmp_path / "r"), target_rate=1.5)))
        assert main(["train", "--config", str(p)]) == 2

    def test_missing_model_reported(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(dict(MINI, out_dir=str(tmp_path / "empty"))))
        assert main(["calibrate", "--config", str(p)]) == 2

    def test_flag_overrides_config(self, tmp_path, capsys):
        cfg = dict(MINI, out_dir=str(tmp_path / "run"), steps=500)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p), "--steps", "12"]) == 0
        out = capsys.readouterr().out
        assert "model.tlmc" in out
