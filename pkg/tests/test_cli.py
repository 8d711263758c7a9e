import json
import subprocess
import sys

import numpy as np
import pytest

from sdg.cli import main
from sdg.config import SCHEMA, format_config, load_run_config, parse_config_text
from sdg.dataio import load_ingested
from sdg.evaluation import generate_eval_negatives
from sdg.events import chronological_split, repeat_ratio
from sdg.synthetic import round_robin_partner_log, write_events_csv


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "events.csv"
    write_events_csv(round_robin_partner_log(10, 300, seed=2), p)
    return p


@pytest.fixture(scope="module")
def data_dir(toy_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("ingested")
    assert main(["ingest", "--events", str(toy_csv), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def train_out(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(data_dir), "--out", str(out),
               "--set", "L=4", "--set", "d=8", "--set", "K=4",
               "--set", "max_epochs=2", "--set", "patience=2",
               "--set", "batch_size=50", "--set", "eval_negatives=5",
               "--set", "dropout=0.0", "--set", "seed=7"])
    assert rc == 0
    return out


def read_metrics(path):
    lines = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            rec.pop("wall_time", None)
            lines.append(rec)
    return lines


class TestConfigParsing:
    def test_defaults_cover_schema(self):
        cfg = load_run_config()
        assert set(cfg.values) == set(SCHEMA)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("bogus_key=1\n")

    def test_comments_and_blanks(self):
        out = parse_config_text("# comment\n\nL=12  # trailing\n")
        assert out == {"L": 12}

    def test_echo_roundtrip(self):
        cfg = load_run_config(overrides=["L=6", "lambda_diff=0.4",
                                         "sequence_diffusion=false"])
        text = format_config(cfg)
        reparsed = parse_config_text(text)
        assert reparsed["L"] == 6
        assert reparsed["lambda_diff"] == 0.4
        assert reparsed["sequence_diffusion"] is False
        full = {k: default for k, (_, default) in SCHEMA.items()}
        full.update(reparsed)
        assert full == cfg.values

    def test_uci_preset_carries_published_values(self):
        cfg = load_run_config("configs/uci")
        assert cfg["L"] == 30 and cfg["K"] == 32
        assert cfg["lambda_inter"] == 1.0 and cfg["lambda_diff"] == 0.2
        assert cfg["n_layers"] == 1 and cfg["d"] == 64
        assert cfg["task_loss"] == "bce" and cfg["batch_size"] == 200

    def test_all_presets_parse(self):
        import glob
        presets = glob.glob("configs/*")
        assert len(presets) == 10
        for p in presets:
            load_run_config(p)

    def test_set_override_wins(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("L=30\n")
        cfg = load_run_config(p, overrides=["L=12"])
        assert cfg["L"] == 12


class TestIngest:
    def test_stats_json(self, toy_csv, tmp_path, capsys):
        out = tmp_path / "ing"
        assert main(["ingest", "--events", str(toy_csv), "--out", str(out)]) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["num_events"] == 300
        assert stats["num_nodes"] == 10
        assert stats["undirected_history"] is True
        log, _ = load_ingested(out)
        assert stats["repeat_ratio"] == pytest.approx(repeat_ratio(log))

    def test_idempotent_byte_identical(self, toy_csv, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["ingest", "--events", str(toy_csv), "--out", str(a)])
        main(["ingest", "--events", str(toy_csv), "--out", str(b)])
        for name in ("events.npy", "node_map.csv", "stats.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_three_event_csv(self, tmp_path):
        src = tmp_path / "t.csv"
        src.write_text("src,dst,ts\n0,1,1.0\n0,2,2.0\n1,2,3.0\n")
        out = tmp_path / "out"
        assert main(["ingest", "--events", str(src), "--out", str(out)]) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["num_events"] == 3

    def test_bipartite_flag_disables_undirected(self, toy_csv, tmp_path):
        out = tmp_path / "bip"
        main(["ingest", "--events", str(toy_csv), "--out", str(out),
              "--bipartite"])
        stats = json.loads((out / "stats.json").read_text())
        assert stats["bipartite"] is True
        assert stats["undirected_history"] is False

    def test_malformed_csv_exit_2(self, tmp_path, capsys):
        src = tmp_path / "bad.csv"
        src.write_text("src,dst,ts\n0,x,1.0\n")
        assert main(["ingest", "--events", str(src),
                     "--out", str(tmp_path / "o")]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["ingest", "--events", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "o")]) == 2


class TestTrain:
    def test_single_epoch_writes_one_metrics_line(self, data_dir, tmp_path):
        out = tmp_path / "run1"
        rc = main(["train", "--data", str(data_dir), "--out", str(out),
                   "--set", "L=4", "--set", "d=8", "--set", "K=2",
                   "--set", "max_epochs=1", "--set", "patience=1",
                   "--set", "eval_negatives=3"])
        assert rc == 0
        lines = read_metrics(out / "metrics.jsonl")
        assert len(lines) == 1
        rec = lines[0]
        assert {"epoch", "train_loss", "val_mrr", "seed", "config_hash"} <= set(rec)
        assert (out / "checkpoint.sdg").exists()
        assert (out / "config.txt").exists()

    def test_seed_reruns_identical(self, data_dir, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = main(["train", "--data", str(data_dir), "--out", str(out),
                       "--set", "L=4", "--set", "d=8", "--set", "K=2",
                       "--set", "max_epochs=2", "--set", "patience=2",
                       "--set", "eval_negatives=3", "--set", "seed=7"])
            assert rc == 0
            outs.append(out)
        assert read_metrics(outs[0] / "metrics.jsonl") == \
            read_metrics(outs[1] / "metrics.jsonl")
        assert (outs[0] / "checkpoint.sdg").read_bytes() == \
            (outs[1] / "checkpoint.sdg").read_bytes()
        assert (outs[0] / "config.txt").read_bytes() == \
            (outs[1] / "config.txt").read_bytes()

    def test_config_echo_reproduces_run(self, data_dir, train_out, tmp_path):
        out2 = tmp_path / "rerun"
        rc = main(["train", "--config", str(train_out / "config.txt"),
                   "--data", str(data_dir), "--out", str(out2)])
        assert rc == 0
        assert read_metrics(train_out / "metrics.jsonl") == \
            read_metrics(out2 / "metrics.jsonl")
        assert (train_out / "checkpoint.sdg").read_bytes() == \
            (out2 / "checkpoint.sdg").read_bytes()

    def test_unknown_set_key_exit_2(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir),
                     "--out", str(tmp_path / "x"),
                     "--set", "nonsense=1"]) == 2


class TestEval:
    def test_report_schema(self, data_dir, train_out, tmp_path, capsys):
        rep_path = tmp_path / "report.json"
        rc = main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                   "--data", str(data_dir), "--split", "test",
                   "--num-neg", "1", "--out", str(rep_path)])
        assert rc == 0
        rep = json.loads(rep_path.read_text())
        assert {"mrr", "hr", "ap", "auc", "num_events", "seed",
                "config_hash", "sigma", "wall_time"} <= set(rep)

    def test_sigma_zero_equals_unset(self, data_dir, train_out, tmp_path):
        reports = []
        for name, extra in (("a", []), ("b", ["--sigma", "0.0"])):
            rp = tmp_path / f"{name}.json"
            rc = main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                       "--data", str(data_dir), "--num-neg", "5",
                       "--out", str(rp)] + extra)
            assert rc == 0
            rec = json.loads(rp.read_text())
            rec.pop("wall_time")
            reports.append(rec)
        assert reports[0] == reports[1]

    def test_sigma_changes_history(self, data_dir, train_out, tmp_path):
        reports = []
        for name, sig in (("a", "0.0"), ("b", "0.5")):
            rp = tmp_path / f"{name}.json"
            main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                  "--data", str(data_dir), "--num-neg", "5",
                  "--sigma", sig, "--out", str(rp)])
            reports.append(json.loads(rp.read_text()))
        assert reports[0]["mrr"] != reports[1]["mrr"]

    def test_negatives_file_reproduces_generated(self, data_dir, train_out,
                                                 tmp_path):
        log, _ = load_ingested(data_dir)
        split = chronological_split(log, 0.70, 0.15)
        lists = generate_eval_negatives(log, split.test, 5, seed=21)
        neg_path = tmp_path / "negs.txt"
        neg_path.write_text(
            "\n".join(" ".join(map(str, row)) for row in lists) + "\n")
        reports = []
        for name, extra in (("gen", ["--num-neg", "5"]),
                            ("file", ["--negatives", str(neg_path)])):
            rp = tmp_path / f"{name}.json"
            rc = main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                       "--data", str(data_dir), "--seed", "21",
                       "--out", str(rp)] + extra)
            assert rc == 0
            rec = json.loads(rp.read_text())
            rec.pop("wall_time")
            reports.append(rec)
        assert reports[0] == reports[1]

    def test_mismatched_data_exit_5(self, train_out, tmp_path):
        csv = tmp_path / "other.csv"
        write_events_csv(round_robin_partner_log(6, 40, seed=3), csv)
        other = tmp_path / "other_data"
        main(["ingest", "--events", str(csv), "--out", str(other)])
        assert main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                     "--data", str(other), "--num-neg", "1",
                     "--out", str(tmp_path / "r.json")]) == 5

    def test_negatives_file_misaligned_exit_2(self, data_dir, train_out,
                                              tmp_path):
        neg_path = tmp_path / "short.txt"
        neg_path.write_text("1 2\n")
        assert main(["eval", "--checkpoint", str(train_out / "checkpoint.sdg"),
                     "--data", str(data_dir), "--negatives", str(neg_path),
                     "--out", str(tmp_path / "r.json")]) == 2


class TestExportEmb:
    def test_export(self, train_out, tmp_path):
        out = tmp_path / "emb.csv"
        rc = main(["export-emb", "--checkpoint",
                   str(train_out / "checkpoint.sdg"), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0].startswith("node_id,dim_0,")
        assert len(lines) == 1 + 10  # header + num_nodes rows
        # values match the checkpoint payload at float32 precision
        from sdg.checkpoint import load_checkpoint
        model, _ = load_checkpoint(train_out / "checkpoint.sdg")
        table = np.loadtxt(out, delimiter=",", skiprows=1)[:, 1:]
        np.testing.assert_array_equal(
            table.astype(np.float32),
            model.node_emb.weight.detach().numpy()[:10])

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main(["export-emb", "--checkpoint", str(tmp_path / "no.sdg"),
                     "--out", str(tmp_path / "e.csv")]) == 2


class TestEntryPoint:
    def test_module_invocation(self, toy_csv, tmp_path):
        out = tmp_path / "sub"
        proc = subprocess.run(
            [sys.executable, "-m", "sdg", "ingest", "--events", str(toy_csv),
             "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0
        assert (out / "stats.json").exists()

    def test_sdg_threads_env(self, toy_csv, tmp_path, monkeypatch):
        monkeypatch.setenv("SDG_THREADS", "1")
        out = tmp_path / "thr"
        assert main(["ingest", "--events", str(toy_csv),
                     "--out", str(out)]) == 0
        import torch
        assert torch.get_num_threads() == 1


class TestExitCodeMapping:
    def test_nonfinite_loss_exit_3(self, data_dir, tmp_path, monkeypatch):
        import sdg.cli as cli
        from sdg.training import NonFiniteLossError

        def blowup(*a, **kw):
            raise NonFiniteLossError("non-finite loss at epoch 0 batch 7")
        monkeypatch.setattr(cli, "train", blowup)
        assert main(["train", "--data", str(data_dir),
                     "--out", str(tmp_path / "x")]) == 3

    def test_io_failure_exit_4(self, data_dir, tmp_path, monkeypatch):
        import sdg.cli as cli

        def nosave(*a, **kw):
            raise OSError("disk full")
        monkeypatch.setattr(cli, "save_checkpoint", nosave)
        assert main(["train", "--data", str(data_dir), "--out",
                     str(tmp_path / "y"), "--set", "L=4", "--set", "d=8",
                     "--set", "K=2", "--set", "max_epochs=1",
                     "--set", "patience=1", "--set", "eval_negatives=2"]) == 4
