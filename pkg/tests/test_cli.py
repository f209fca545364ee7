"""Command tests: artifact layout, manifests, exit codes, reproducibility."""

from __future__ import annotations

import csv
import json
import os

import numpy as np
import pytest

from etnn.cli import main
from etnn.complexes import build_complex, complex_to_json, load_complex


def _write_graph(path, n=4):
    doc = {
        "num_nodes": n,
        "spatial_dim": 2,
        "positions": [[float(i), float(i % 2)] for i in range(n)],
        "edges": [[i, i + 1] for i in range(n - 1)],
        "node_features": [[1.0]] * n,
    }
    path.write_text(json.dumps(doc))
    return path


CONFIG = """
[model]
hidden = 8
num_layers = 1
invariants = "dist:sum"
mode = "invariant"
neighborhoods = "adj_up, inc_up, inc_down"

[train]
epochs = {epochs}
batch_size = 2
base_lr = 1e-3
fractions = [0.5, 0.25, 0.25]
seed = {seed}
"""


def _write_config(path, epochs=4, seed=1):
    path.write_text(CONFIG.format(epochs=epochs, seed=seed))
    return path


def _write_dataset(tmp_path, count=4):
    gpath = _write_graph(tmp_path / "g.json")
    out = tmp_path / "cc.json"
    assert main(["lift", "--graph", str(gpath), "--recipe", "graph+edges",
                 "--out", str(out)]) == 0
    cc = load_complex(out)
    data = tmp_path / "data"
    data.mkdir()
    index = {"samples": []}
    for i in range(count):
        fname = f"s{i}.json"
        (data / fname).write_text(complex_to_json(cc))
        index["samples"].append({"file": fname, "target": [float(i)]})
    (data / "index.json").write_text(json.dumps(index))
    return data


# -- lift and inspect ------------------------------------------------------------------


def test_lift_writes_complex_and_manifest(tmp_path, capsys):
    gpath = _write_graph(tmp_path / "g.json")
    out = tmp_path / "cc.json"
    assert main(["lift", "--graph", str(gpath), "--recipe", "graph+edges",
                 "--out", str(out)]) == 0
    assert out.exists()
    summary = capsys.readouterr().out
    assert "rank0:4 rank1:3" in summary
    manifest = json.loads((tmp_path / "cc.json.manifest.json").read_text())
    assert manifest["command"] == "lift"
    assert str(out) in manifest["artifacts"]
    assert manifest["version"]
    assert manifest["started"]


def test_lift_failure_leaves_manifest_but_no_output(tmp_path):
    gpath = _write_graph(tmp_path / "g.json")
    out = tmp_path / "cc.json"
    rc = main(["lift", "--graph", str(gpath), "--recipe", "nope", "--out", str(out)])
    assert rc == 2
    assert not out.exists()
    assert (tmp_path / "cc.json.manifest.json").exists()


def test_lift_malformed_json_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["lift", "--graph", str(bad), "--recipe", "graph",
               "--out", str(tmp_path / "x.json")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad.json:1:" in err


def test_inspect_prints_rank_counts_and_degrees(tmp_path, capsys):
    gpath = _write_graph(tmp_path / "g.json")
    out = tmp_path / "cc.json"
    main(["lift", "--graph", str(gpath), "--recipe", "graph+edges", "--out", str(out)])
    capsys.readouterr()
    assert main(["inspect", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "rank0:4 rank1:3"
    assert "inc_down|r1<-r0: pairs=6" in text


def test_unknown_flag_exits_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["inspect", "--frobnicate", "x.json"])
    assert exc.value.code == 2


# -- train and eval --------------------------------------------------------------------


def test_train_writes_history_with_one_row_per_epoch(tmp_path):
    data = _write_dataset(tmp_path)
    cfg = _write_config(tmp_path / "cfg.toml", epochs=6)
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--out-dir", str(out)]) == 0
    assert sorted(os.listdir(out)) == [
        "checkpoint.npz", "history.csv", "history.png", "manifest.json",
    ]
    with open(out / "history.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert rows[0]["epoch"] == "1"


def test_train_then_eval_prints_metric(tmp_path, capsys):
    data = _write_dataset(tmp_path)
    cfg = _write_config(tmp_path / "cfg.toml")
    out = tmp_path / "run"
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(out)])
    capsys.readouterr()
    assert main(["eval", "--data", str(data), "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz")]) == 0
    line = capsys.readouterr().out
    assert line.startswith("mae=")
    assert "(test, 1 samples)" in line


def test_train_is_reproducible_byte_for_byte(tmp_path):
    data = _write_dataset(tmp_path)
    cfg = _write_config(tmp_path / "cfg.toml")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(out1)])
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(out2)])
    assert (out1 / "history.csv").read_bytes() == (out2 / "history.csv").read_bytes()
    assert (out1 / "checkpoint.npz").read_bytes() == (out2 / "checkpoint.npz").read_bytes()


def test_resume_continues_step_counter(tmp_path):
    data = _write_dataset(tmp_path)
    cfg = _write_config(tmp_path / "cfg.toml", epochs=3)
    first, second = tmp_path / "one", tmp_path / "two"
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(first)])

    def step_of(path):
        with open(path, "rb") as fh:
            return json.loads(fh.readline())["step"]

    fresh = step_of(first / "checkpoint.npz")
    assert fresh > 0
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(second),
          "--resume", str(first / "checkpoint.npz")])
    assert step_of(second / "checkpoint.npz") == 2 * fresh


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    data = _write_dataset(tmp_path)
    cfg = tmp_path / "cfg.toml"
    # config without an explicit train seed
    cfg.write_text(CONFIG.format(epochs=2, seed=1).replace("seed = 1\n", ""))
    monkeypatch.setenv("ETNN_SEED", "77")
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 77


def test_flag_seed_beats_config_seed(tmp_path):
    data = _write_dataset(tmp_path)
    cfg = _write_config(tmp_path / "cfg.toml", seed=5)
    out = tmp_path / "run"
    main(["train", "--data", str(data), "--config", str(cfg),
          "--out-dir", str(out), "--seed", "9"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9


def test_eval_rejects_empty_split(tmp_path, capsys):
    data = _write_dataset(tmp_path)
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(CONFIG.format(epochs=2, seed=1).replace(
        "fractions = [0.5, 0.25, 0.25]", "fractions = [1.0, 0.0, 0.0]"))
    out = tmp_path / "run"
    main(["train", "--data", str(data), "--config", str(cfg), "--out-dir", str(out)])
    rc = main(["eval", "--data", str(data), "--config", str(cfg),
               "--checkpoint", str(out / "checkpoint.npz"), "--split", "test"])
    assert rc == 2
    assert "empty" in capsys.readouterr().err


def test_node_level_training_from_single_complex(tmp_path):
    rng = np.random.default_rng(0)
    positions = rng.normal(size=(6, 2))
    cells = [((i,), 0, np.ones(1)) for i in range(6)]
    cells += [((i, i + 1), 1, np.ones(1)) for i in range(5)]
    cc = build_complex(positions, cells, target_level="node",
                       target_values=rng.normal(size=6))
    path = tmp_path / "graph.json"
    path.write_text(complex_to_json(cc))
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("""
[model]
hidden = 8
num_layers = 1
invariants = "dist:sum"
mode = "invariant"
readout_level = "node"
neighborhoods = "adj_up, inc_up, inc_down"

[train]
epochs = 3
batch_size = 1
fractions = [0.5, 0.25, 0.25]
""")
    out = tmp_path / "run"
    assert main(["train", "--data", str(path), "--config", str(cfg),
                 "--out-dir", str(out)]) == 0
    with open(out / "history.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_dataset_without_target_is_rejected(tmp_path, capsys):
    data = _write_dataset(tmp_path)
    index = json.loads((data / "index.json").read_text())
    del index["samples"][0]["target"]
    (data / "index.json").write_text(json.dumps(index))
    cfg = _write_config(tmp_path / "cfg.toml")
    rc = main(["train", "--data", str(data), "--config", str(cfg),
               "--out-dir", str(tmp_path / "run")])
    assert rc == 2
    assert "no target" in capsys.readouterr().err


# -- bench and check -------------------------------------------------------------------


def test_bench_kchain_writes_csv_and_figure(tmp_path, capsys):
    out = tmp_path / "kc"
    rc = main(["bench", "kchain", "--variants", "1a", "--layers", "1",
               "--widths", "8", "--seeds", "1", "--epochs", "30",
               "--out-dir", str(out)])
    assert rc == 0
    assert (out / "kchain.csv").exists()
    assert (out / "kchain.png").stat().st_size > 0
    assert json.loads((out / "manifest.json").read_text())["command"] == "bench kchain"
    with open(out / "kchain.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["variant"] == "1a"


def test_bench_scaling_single_size_reports_no_slope(tmp_path, capsys):
    out = tmp_path / "sc"
    rc = main(["bench", "scaling", "--regime", "sparse", "--counts", "51",
               "--repeats", "1", "--out-dir", str(out)])
    assert rc == 0
    assert "slope n/a" in capsys.readouterr().out
    assert (out / "scaling.csv").exists()
    assert (out / "scaling.png").exists()


def test_check_passes_on_fresh_build(capsys):
    rc = main(["check", "--trials", "4", "--hasse-trials", "3", "--grad-configs", "2"])
    assert rc == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == 3
