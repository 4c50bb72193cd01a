import json

import pytest

from ctlm.cli import main
from ctlm.corpus import Vocabulary
from conftest import synthetic_text


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text(synthetic_text(9_000, seed=2), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained_run(corpus_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "train", "--data", str(corpus_file), "--mode", "word",
        "--vocab-size", "300", "--objective", "ce", "--steps", "30",
        "--eval-interval", "10", "--trunk", "32", "--batch", "4",
        "--lr", "3e-3", "--d-model", "32", "--layers", "1", "--heads", "2",
        "--d-ff", "64", "--max-positions", "160", "--seed", "0",
        "--out", str(out),
    ])
    assert rc == 0
    return out / "ce"


class TestTrainCli:
    def test_artifacts_written(self, trained_run):
        assert (trained_run / "best.ckpt").exists()
        assert (trained_run / "vocab.txt").exists()
        manifest = json.loads((trained_run / "manifest.json").read_text())
        assert manifest["config"]["train"]["objective"] == "ce"
        assert manifest["thread_count"] >= 1

    def test_env_var_default_out_dir(self, corpus_file, tmp_path, monkeypatch):
        monkeypatch.setenv("CTLM_OUT_DIR", str(tmp_path / "envout"))
        rc = main([
            "train", "--data", str(corpus_file), "--vocab-size", "300",
            "--steps", "6", "--eval-interval", "3", "--trunk", "32",
            "--batch", "4", "--d-model", "32", "--layers", "1", "--heads", "2",
            "--d-ff", "64", "--max-positions", "64",
        ])
        assert rc == 0
        assert (tmp_path / "envout" / "ce" / "manifest.json").exists()

    def test_config_file_with_flag_override(self, corpus_file, tmp_path):
        cfg = {"train": {"objective": "ce+ct", "total_steps": 8, "eval_interval": 4,
                         "trunk_length": 32, "batch_size": 4, "negative_window": 4,
                         "ct_crop_length": 8},
               "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "d_ff": 64,
                         "max_positions": 64}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        rc = main([
            "train", "--config", str(cfg_path), "--data", str(corpus_file),
            "--vocab-size", "300", "--m", "2", "--out", str(tmp_path / "o"),
        ])
        assert rc == 0
        manifest = json.loads((tmp_path / "o" / "ce+ct" / "manifest.json").read_text())
        assert manifest["config"]["train"]["negative_window"] == 2  # flag wins
        assert manifest["config"]["train"]["total_steps"] == 8

    def test_bad_config_key_rejected(self, corpus_file, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"train": {"bogus_key": 1}}))
        rc = main(["train", "--config", str(cfg_path), "--data", str(corpus_file)])
        assert rc == 2


class TestGenerateCli:
    def test_jsonl_output(self, trained_run, tmp_path):
        vocab = Vocabulary.load(trained_run / "vocab.txt", mode="word")
        prompts = tmp_path / "prompts.txt"
        prompts.write_text("the of and to\nword but not what\n", encoding="utf-8")
        out = tmp_path / "gen.jsonl"
        rc = main([
            "generate", "--checkpoint", str(trained_run / "best.ckpt"),
            "--vocab", str(trained_run / "vocab.txt"), "--prefixes", str(prompts),
            "--decode", "greedy", "--gen-len", "12", "--out", str(out),
        ])
        assert rc == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 2
        for rec in lines:
            assert set(rec) == {"prefix", "continuation", "per_step_logprob"}
            assert len(rec["per_step_logprob"]) == 12
            assert all(w in vocab.tokens for w in rec["continuation"].split())

    def test_decode_strategies_accepted(self, trained_run, tmp_path):
        prompts = tmp_path / "p.txt"
        prompts.write_text("the of and\n", encoding="utf-8")
        for decode_args in (["--decode", "beam", "--beam-size", "3"],
                            ["--decode", "topk", "--k", "5", "--seed", "3"],
                            ["--decode", "nucleus", "--top-p", "0.8"]):
            rc = main([
                "generate", "--checkpoint", str(trained_run / "best.ckpt"),
                "--vocab", str(trained_run / "vocab.txt"), "--prefixes", str(prompts),
                "--gen-len", "6", "--out", str(tmp_path / "g.jsonl"), *decode_args,
            ])
            assert rc == 0


class TestEvaluateCli:
    def test_report_and_csv(self, trained_run, corpus_file, tmp_path):
        out = tmp_path / "report.json"
        rc = main([
            "evaluate", "--checkpoint", str(trained_run / "best.ckpt"),
            "--vocab", str(trained_run / "vocab.txt"), "--data", str(corpus_file),
            "--trunk", "32", "--decode", "greedy", "--prefix-len", "8",
            "--gen-len", "16", "--max-instances", "4", "--heatmap-instances", "2",
            "--out", str(out), "--heatmap-csv", str(tmp_path / "heat.csv"),
            "--histogram-csv", str(tmp_path / "hist.csv"),
        ])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["n_instances"] == 4
        assert "heatmap_mean" not in report
        heat_rows = (tmp_path / "heat.csv").read_text().splitlines()
        assert len(heat_rows) == 16
        hist_rows = (tmp_path / "hist.csv").read_text().splitlines()
        assert len(hist_rows) == 2

    def test_reference_row(self, trained_run, corpus_file, tmp_path):
        out = tmp_path / "human.json"
        rc = main([
            "evaluate", "--checkpoint", str(trained_run / "best.ckpt"),
            "--vocab", str(trained_run / "vocab.txt"), "--data", str(corpus_file),
            "--trunk", "32", "--prefix-len", "8", "--gen-len", "16",
            "--reference", "--out", str(out),
        ])
        assert rc == 0
        assert "ppl" not in json.loads(out.read_text())


class TestGradcheckCli:
    def test_all_losses_pass(self, capsys):
        rc = main(["gradcheck", "--loss", "all", "--trials", "30", "--seed", "1"])
        out = capsys.readouterr().out
        assert rc == 0
        reports = json.loads(out)
        assert {r["loss"] for r in reports} == {"ce", "ul", "ct", "nce"}
        assert all(r["max_rel_err"] <= 1e-6 for r in reports)
        assert all(r["sign_violations"] == 0 for r in reports)

    def test_single_loss_report(self, capsys):
        rc = main(["gradcheck", "--loss", "ct", "--trials", "10"])
        report = json.loads(capsys.readouterr().out)
        assert rc == 0
        assert report["loss"] == "ct"


class TestReportCli:
    def test_table_rendering(self, tmp_path, capsys):
        a = {"ppl": 10.0, "rep_1": 0.5, "uniq_1": 100}
        b = {"ppl": 12.0, "rep_1": 0.2, "uniq_1": 220}
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        pa.write_text(json.dumps(a))
        pb.write_text(json.dumps(b))
        rc = main(["report", str(pa), str(pb), "--names", "ce,ct",
                   "--csv", str(tmp_path / "cmp.csv")])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.splitlines()[0].startswith("method")
        assert "ce" in out and "ct" in out and "--" in out
        assert (tmp_path / "cmp.csv").read_text().count("\n") == 3

    def test_error_reported_cleanly(self, tmp_path, capsys):
        rc = main(["report", str(tmp_path / "a.json"), "--names", "x,y"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err
