import csv
import json

import pytest

from dynafuse.cli import main

TINY = {
    "scene": {"grid": {"x_min": -4.0, "x_max": 4.0, "y_min": -4.0, "y_max": 4.0},
              "gen": {"n_boxes": [1, 3], "margin": 0.5}},
    "train": {"steps": 2, "train_scenes": 1, "val_scenes": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def err_of(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("error: ")
    return json.loads(line[len("error: "):])


def test_synth_manifest_and_determinism(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", cfg_file, "--seed", "2", "--count", "3", "--out", str(a)]) == 0
    assert main(["synth", "--config", cfg_file, "--seed", "2", "--count", "3", "--out", str(b)]) == 0
    m = json.loads((a / "manifest.json").read_text())
    assert m["count"] == 3 and [e["seed"] for e in m["scenes"]] == [20000, 20001, 20002]
    for e in m["scenes"]:
        assert (a / e["file"]).read_bytes() == (b / e["file"]).read_bytes()
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()


def test_synth_zero_count(tmp_path, cfg_file):
    out = tmp_path / "z"
    assert main(["synth", "--config", cfg_file, "--count", "0", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["scenes"] == []
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]


def test_malformed_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("pipeline:\n  fusion:\n    ordre: channel_space\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    e = err_of(capsys)
    assert e["kind"] == "config" and "pipeline.fusion.ordre" in e["message"]
    bad.write_text("pipeline: [1, 2\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_missing_config_file_exit_3(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 3
    assert err_of(capsys)["kind"] == "io"


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path)]) == 3
    assert err_of(capsys)["kind"] == "missing_checkpoint"


def test_plot_without_checkpoint(tmp_path, cfg_file, capsys):
    assert main(["plot", "--config", cfg_file, "--out", str(tmp_path)]) == 0
    assert "ground-truth heatmap only" in capsys.readouterr().err
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == [f"F_g_c{k}.pgm" for k in range(4)]


def test_train_eval_plot(tmp_path, cfg_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--out", str(run)]) == 0
    for name in ("checkpoint.npz", "loss.csv", "config.json", "metrics.csv"):
        assert (run / name).is_file()
    rows = list(csv.DictReader(open(run / "loss.csv")))
    assert len(rows) == 2 and "total" in rows[0]

    scenes = tmp_path / "scenes"
    assert main(["synth", "--config", cfg_file, "--seed", "5", "--count", "2", "--out", str(scenes)]) == 0
    ev = tmp_path / "ev"
    args = ["eval", "--checkpoint", str(run / "checkpoint.npz"), "--scenes", str(scenes), "--out", str(ev)]
    assert main(args) == 0
    first = (ev / "metrics.csv").read_text()
    assert main(args) == 0
    assert (ev / "metrics.csv").read_text() == first
    assert main(args + ["--lidar-dropout", "1.0"]) == 0

    pl = tmp_path / "pl"
    assert main(["plot", "--checkpoint", str(run / "checkpoint.npz"), "--loss", str(run / "loss.csv"),
                 "--out", str(pl)]) == 0
    names = {p.name for p in pl.iterdir()}
    assert {"fused.pgm", "E_x.pgm", "E_y.pgm", "loss.svg"} <= names
    assert any(n.startswith("F_x_star_c") for n in names)


def test_eval_rejects_other_pipeline(tmp_path, cfg_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--out", str(run)]) == 0
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "pipeline": {"channels": 8, "fusion": {"order": "space_channel"}}}))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--config", str(other),
                 "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("table,rows", [("IVa", 4), ("IVh", 2)])
def test_ablate_csv(tmp_path, cfg_file, capsys, table, rows):
    t = json.loads(open(cfg_file).read())
    t["train"]["steps"] = 1
    p = tmp_path / "t.json"
    p.write_text(json.dumps(t))
    assert main(["ablate", "--config", str(p), "--table", table, "--out", str(tmp_path)]) == 0
    text = (tmp_path / f"ablation_{table}.csv").read_text()
    assert capsys.readouterr().out == text
    data = list(csv.reader(text.splitlines()))
    assert len(data) == rows + 1 and "mAP" in data[0]
    for r in data[1:]:
        assert 0.0 <= float(r[data[0].index("mAP")]) <= 1.0


def test_config_reference(capsys):
    assert main(["config", "--reference"]) == 0
    out = capsys.readouterr().out
    assert "pipeline.fusion.order = \"channel_space\"" in out


def test_env_override(monkeypatch, capsys):
    monkeypatch.setenv("DYNAFUSE_PIPELINE__FUSION__ORDER", "space_channel")
    assert main(["config"]) == 0
    assert json.loads(capsys.readouterr().out)["pipeline"]["fusion"]["order"] == "space_channel"


def test_unwritable_out_exit_3(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--count", "1", "--out", str(blocker / "sub")]) == 3
    e = err_of(capsys)
    assert e["kind"] == "io" and str(blocker / "sub") in e["message"]
