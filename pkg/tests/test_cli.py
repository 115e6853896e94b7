import csv
import json

import numpy as np
import pytest

from dualbind.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from dualbind.data import Manifest, ManifestEntry, load_dir, save_dataset, save_manifest
from dualbind.energy import EnergyModel

TINY = {"hidden": 4, "layers": 1, "epochs": 2, "batch_size": 8}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "gen.json", {"n_complexes": 20, "seed": 4, "pool_factor": 1})
    assert main(["gen", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def train_cfg(dataset):
    return write_json(dataset / "train.json", TINY)


def test_gen_writes_files_and_summary(dataset, capsys, tmp_path):
    for name in ("dataset.jsonl", "manifest.json"):
        assert (dataset / "data" / name).is_file()
    cfg = write_json(tmp_path / "g.json", {"n_complexes": 6, "seed": 1, "pool_factor": 1})
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert sum(out["splits"].values()) == 6 and out["labels"]["n"] == 6


def test_gen_is_deterministic(tmp_path):
    cfg = write_json(tmp_path / "g.json", {"n_complexes": 6, "seed": 2, "pool_factor": 1})
    main(["gen", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["gen", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/dataset.jsonl").read_bytes() == (tmp_path / "b/dataset.jsonl").read_bytes()


def test_gen_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["gen", "--config", str(missing), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_bad_config_and_usage_exit_2(tmp_path):
    bad = write_json(tmp_path / "g.json", {"n_complexes": -3})
    assert main(["gen", "--config", bad, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG


def test_train_outputs_and_default_lambda(dataset, train_cfg, capsys):
    out = dataset / "run_dual"
    assert main(["train", "--config", train_cfg, "--data", str(dataset / "data"), "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs"] == 2
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["epoch", "l_mse", "l_dsm", "total", "val_pearson"] and len(rows) == 3
    _, meta = EnergyModel.load(out / "best.ckpt")
    assert meta["train_config"]["lambda"] == 2.0 and meta["mode"] == "dual"


def unlabeled_copy(dataset, tmp_path):
    cs, m = load_dir(dataset / "data")
    train_ids = set(m.ids("train"))
    kept = [c.with_label(None) for c in cs if c.id in train_ids]
    d = tmp_path / "unl"
    d.mkdir()
    save_dataset(kept, d / "dataset.jsonl")
    save_manifest(Manifest([ManifestEntry(c.id, "train", False) for c in kept]), d / "manifest.json")
    return d


def test_unlabeled_data_per_mode(dataset, train_cfg, tmp_path, capsys):
    d = unlabeled_copy(dataset, tmp_path)
    rc = main(["train", "--config", train_cfg, "--data", str(d), "--out", str(tmp_path / "r1"), "--mode", "mse_only", "--quiet"])
    assert rc == EXIT_CONFIG and "no labeled samples" in capsys.readouterr().err
    rc = main(["train", "--config", train_cfg, "--data", str(d), "--out", str(tmp_path / "r2"), "--mode", "dsm_only", "--quiet"])
    assert rc == EXIT_OK and (tmp_path / "r2" / "best.ckpt").is_file()


def test_eval_dsm_only_reports_na(dataset, train_cfg, capsys):
    out = dataset / "run_dsm"
    main(["train", "--config", train_cfg, "--data", str(dataset / "data"), "--out", str(out), "--mode", "dsm_only", "--quiet"])
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "best.ckpt"), "--data", str(dataset / "data"), "--split", "test"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["rmse"] == "N/A" and rep["n"] >= 2


def test_eval_single_sample_split_exits_2(dataset, train_cfg, tmp_path, capsys):
    cs, m = load_dir(dataset / "data")
    a = cs[0]
    b = next(c for c in cs if c.ligand_key != a.ligand_key)
    d = tmp_path / "one"
    d.mkdir()
    save_dataset([a, b], d / "dataset.jsonl")
    save_manifest(Manifest([ManifestEntry(a.id, "train"), ManifestEntry(b.id, "test")]), d / "manifest.json")
    out = dataset / "run_dual"
    if not (out / "best.ckpt").exists():
        main(["train", "--config", train_cfg, "--data", str(dataset / "data"), "--out", str(out), "--quiet"])
    assert main(["eval", "--ckpt", str(out / "best.ckpt"), "--data", str(d), "--split", "test"]) == EXIT_CONFIG
    assert "need ≥ 2 for correlations" in capsys.readouterr().err


def test_bad_checkpoint_exits_2(dataset, tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_text("{}")
    assert main(["eval", "--ckpt", str(bad), "--data", str(dataset / "data")]) == EXIT_CONFIG


def test_predict_and_rankfit(dataset, train_cfg, tmp_path, capsys):
    out = dataset / "run_dual"
    if not (out / "best.ckpt").exists():
        main(["train", "--config", train_cfg, "--data", str(dataset / "data"), "--out", str(out), "--quiet"])
    capsys.readouterr()
    assert main(["predict", "--ckpt", str(out / "best.ckpt"), "--data", str(dataset / "data")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "id,prediction" and len(lines) > 2
    rf = tmp_path / "rank.csv"
    assert main(["rankfit", "--ckpt", str(out / "best.ckpt"), "--data", str(dataset / "data"), "--out", str(rf)]) == 0
    assert rf.read_text().splitlines()[0] == "id,true_rank,pred_rank"


def test_nan_abort_exits_3(dataset, tmp_path):
    cfg = write_json(tmp_path / "t.json", {**TINY, "learning_rate": 1e300})
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["train", "--config", cfg, "--data", str(dataset / "data"), "--out", str(tmp_path / "r"), "--quiet"])
    assert rc == EXIT_NUMERIC
    dump = json.loads((tmp_path / "r" / "abort.json").read_text())
    assert dump["ids"] and len(dump["sigmas"]) == len(dump["ids"])


def test_semi_supervised_table_and_determinism(dataset, tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "t.json", {**TINY, "epochs": 1})
    args = ["experiment", "--recipe", "semi_supervised", "--config", cfg, "--data", str(dataset / "data")]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    rows = list(csv.reader(a.splitlines()))
    assert rows[0][:3] == ["method", "mode", "labeled_fraction"]
    assert [r[0] for r in rows[1:]] == ["mse_only@50%", "dual@50%+50%unlabeled", "mse_only@100%"]
    monkeypatch.setenv("DUALBIND_SEED", "9")
    assert main(args + ["--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text() != a


def test_unknown_recipe(dataset, train_cfg):
    assert main(["experiment", "--recipe", "grid", "--config", train_cfg, "--data", str(dataset / "data")]) == EXIT_CONFIG
