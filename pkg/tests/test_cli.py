import csv
import json

import pytest

from mgmt.cli import main, parse_grid

SMALL = {"data": {"preset": "experiment1", "overrides": {"sample_count": 30}},
         "model": {"encoder": {"layers": 1, "heads": 1, "dim": 4}, "hidden": 4},
         "train": {"epochs": 2}, "reps": 2}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_grid():
    assert parse_grid("0.1:0.7:0.1") == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    assert parse_grid("0.2,0.5") == [0.2, 0.5]


def test_verify_exits_zero(tmp_path):
    assert main(["verify", "--out", str(tmp_path), "--quiet"]) == 0
    body = rows(tmp_path / "verify.csv")
    assert body and all(r["ok"] == "True" for r in body)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "verify" and "verify.csv" in manifest["outputs"]


def test_unknown_flag_exits_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == 2


def test_generate_then_train_then_evaluate(tmp_path, cfg):
    d = tmp_path / "gen"
    assert main(["generate", "--config", cfg, "--out", str(d), "--quiet"]) == 0
    t = tmp_path / "train"
    assert main(["train", "--config", cfg, "--data", str(d / "dataset.json"), "--out", str(t), "--quiet"]) == 0
    for name in ("model.json", "report.json", "epochs.csv", "gamma.csv", "metrics.json"):
        assert (t / name).exists()
    assert len(rows(t / "epochs.csv")) == 2
    e = tmp_path / "eval"
    assert main(["evaluate", "--config", cfg, "--model", str(t / "model.json"),
                 "--data", str(d / "dataset.json"), "--out", str(e), "--quiet"]) == 0
    acc = json.loads((e / "metrics.json").read_text())["accuracy"]
    assert 0.0 <= acc <= 1.0


def test_missing_data_file_exits_one(tmp_path, cfg):
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_ablate_emits_six_rows(tmp_path, cfg):
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    body = rows(tmp_path / "ablate.csv")
    assert [r["variant"] for r in body] == ["full", "no_adaptive_depth", "no_supernodes", "no_inter_edges",
                                            "no_intra_edges", "no_meta_graph_no_adaptive_depth"]


def test_sweep_tau_grid(tmp_path, cfg):
    assert main(["sweep", "--config", cfg, "--param", "tau", "--grid", "0.1:0.7:0.1", "--reps", "1",
                 "--out", str(tmp_path), "--quiet"]) == 0
    body = rows(tmp_path / "sweep.csv")
    assert len(body) == 7
    counts = [float(r["mean_supernodes"]) for r in body]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert all(r["mean_epoch_seconds"] == "" for r in body)


def test_repeat_is_byte_deterministic_and_rerunnable(tmp_path, cfg):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out in (a, b):
        assert main(["repeat", "--config", cfg, "--out", str(out), "--quiet", "--seed", "5"]) == 0
    for name in ("repeat.csv", "summary.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["repeat", "--config", str(a / "manifest.json"), "--seed", "5", "--out", str(c),
                 "--quiet"]) == 0
    assert (a / "repeat.csv").read_bytes() == (c / "repeat.csv").read_bytes()


def test_threads_do_not_change_results(tmp_path, cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["repeat", "--config", cfg, "--out", str(a), "--quiet"]) == 0
    assert main(["repeat", "--config", cfg, "--out", str(b), "--quiet", "--threads", "2"]) == 0
    assert (a / "repeat.csv").read_bytes() == (b / "repeat.csv").read_bytes()


def test_search_writes_best(tmp_path, cfg):
    assert main(["search", "--config", cfg, "--budget", "2", "--out", str(tmp_path), "--quiet"]) == 0
    assert len(rows(tmp_path / "search.csv")) == 2
    assert "val_acc" in json.loads((tmp_path / "best.json").read_text())


def test_interpret_outputs(tmp_path, cfg):
    assert main(["interpret", "--config", cfg, "--out", str(tmp_path), "--quiet", "--tau", "0.0"]) == 0
    for name in ("frequencies.csv", "depth_attention.csv", "meta_graphs.csv", "frequency_metadata.json"):
        assert (tmp_path / name).exists()
    assert main(["interpret", "--config", cfg, "--out", str(tmp_path / "x"), "--quiet",
                 "--sample-index", "999"]) == 1


def test_evaluate_rejects_mismatched_dataset(tmp_path, cfg, capsys):
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--quiet"]) == 0
    assert main(["generate", "--preset", "experiment2", "--out", str(tmp_path / "d"), "--quiet"]) == 0
    assert main(["evaluate", "--model", str(tmp_path / "t" / "model.json"),
                 "--data", str(tmp_path / "d" / "dataset.json"), "--out", str(tmp_path / "e")]) == 1
    assert "model expects 5 x 10" in capsys.readouterr().err
