"""Configuration, exit codes, output discipline and the end-to-end pipeline on a small run."""
import csv
import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from conftest import dump_config, mnist_config, write_idx
from layerprobe import cli
from layerprobe.checkpoint import load_checkpoint
from layerprobe.config import RunConfig
from layerprobe.data import load_idx
from layerprobe.errors import ValidationError
from layerprobe.model import accuracy
from layerprobe.perturbation import example_from_record


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- config


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.from_dict(mnist_config(tmp_path / "o"), base_dir=tmp_path)
    assert cfg.raw["corpus"]["seeds_per_class"] == 2
    assert cfg.attack.delta == 0.1 and cfg.attack.max_iterations == 20
    assert cfg.seeds == {"train": 1, "attack": 2, "noise": 3}
    bare = mnist_config(tmp_path / "o")
    for key in ("corpus", "report", "seeds", "training", "attack", "model"):
        del bare[key]
    cfg = RunConfig.from_dict(bare)
    assert cfg.raw["corpus"]["seeds_per_class"] == 5
    assert cfg.raw["training"] == {"epochs": 5, "batch_size": 32, "learning_rate": 0.05}
    assert RunConfig.from_dict(bare, seed=9).seeds == {"train": 9, "attack": 9, "noise": 9}


def test_config_hash_ignores_output_dir(tmp_path):
    a = RunConfig.from_dict(mnist_config(tmp_path / "a"))
    b = RunConfig.from_dict(mnist_config(tmp_path / "b"))
    c = RunConfig.from_dict(mnist_config(tmp_path / "a", attack={"delta": 0.2}))
    assert a.config_hash == b.config_hash != c.config_hash
    assert a.train_hash == c.train_hash and a.attack_hash != c.attack_hash


@pytest.mark.parametrize("patch", [
    {"dataset": {"format": "tiff"}},
    {"attack": {"delta": 0}},
    {"attack": {"strategy": "loud"}},
    {"training": {"epochs": -1}},
    {"colour": "red"},
    {"model": {"arch": "custom"}},
])
def test_config_schema_rejections(tmp_path, patch):
    with pytest.raises(ValidationError):
        RunConfig.from_dict(mnist_config(tmp_path, **patch))


def test_config_paths_must_exist(tmp_path):
    cfg = RunConfig.from_dict(mnist_config(tmp_path, dataset={"test": {"images": "nope", "labels": "nope"}}),
                              base_dir=tmp_path)
    with pytest.raises(ValidationError, match="nope"):
        cfg.check_paths("test")


def test_relative_paths_resolve_against_config(tmp_path):
    cfg = mnist_config("out")
    path = dump_config(tmp_path / "c.json", cfg)
    assert RunConfig.load(path).output_dir == tmp_path / "out"


# ----------------------------------------------------------------- exit codes


def test_missing_dataset_exit_and_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = mnist_config(out, dataset={"train": {"images": str(tmp_path / "missing.gz"),
                                               "labels": str(tmp_path / "missing-l.gz")}})
    code = cli.main(["train", "--config", str(dump_config(tmp_path / "c.json", cfg))])
    assert code == 1
    assert "missing.gz" in capsys.readouterr().err
    assert not out.exists()


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly", "--config", "x.json"])
    assert exc.value.code == 1
    assert cli.main(["train", "--config", str(tmp_path / "absent.json")]) == 1
    (tmp_path / "bad.json").write_text("{")
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 1
    good = dump_config(tmp_path / "c.json", mnist_config(tmp_path / "o"))
    assert cli.main(["train", "--config", str(good), "--jobs", "0"]) == 1


def test_corrupt_dataset_exit_2(tmp_path):
    imgs = write_idx(tmp_path / "i.idx", np.zeros((4, 28, 28), np.uint8))
    imgs.write_bytes(imgs.read_bytes()[:-10])
    labels = write_idx(tmp_path / "l.idx", np.zeros(4, np.uint8))
    split = {"images": str(imgs), "labels": str(labels)}
    cfg = mnist_config(tmp_path / "o", dataset={"train": split, "test": split})
    assert cli.main(["train", "--config", str(dump_config(tmp_path / "c.json", cfg))]) == 2
    assert not (tmp_path / "o").exists()


def test_numeric_blowup_exit_3(tmp_path):
    cfg = mnist_config(tmp_path / "o", dataset={"train_limit": 64}, training={"epochs": 1, "learning_rate": 1e30})
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", str(dump_config(tmp_path / "c.json", cfg))]) == 3
    assert not (tmp_path / "o").exists()


def test_attack_without_checkpoint(tmp_path):
    path = dump_config(tmp_path / "c.json", mnist_config(tmp_path / "o"))
    assert cli.main(["attack", "--config", str(path)]) == 1


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "layerprobe.cli", "report", "--config", str(tmp_path / "none.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "does not exist" in proc.stderr


# ----------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    path = dump_config(root / "config.json", mnist_config(root / "out"))
    for command in ("train", "attack", "analyze", "report"):
        assert cli.main([command, "--config", str(path)]) == 0, command
    return RunConfig.load(path), path


def test_train_report_matches_reevaluation(pipeline):
    cfg, _ = pipeline
    report = json.loads((cfg.output_dir / "train_report.json").read_text())
    model = load_checkpoint(cfg.output_dir / "checkpoint.lpck")
    test = load_idx(*cfg.dataset_paths("test"), 10)
    assert abs(report["test_accuracy"] - accuracy(model, test.images, test.labels)) <= 1e-6
    assert report["seeds"] == cfg.seeds and report["config_hash"] == cfg.config_hash
    assert report["train_size"] == 1000


def test_retrain_is_byte_identical(pipeline, tmp_path):
    cfg, path = pipeline
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.lpck").read_bytes() == (cfg.output_dir / "checkpoint.lpck").read_bytes()


def test_corpus_and_yield(pipeline):
    cfg, _ = pipeline
    lines = (cfg.output_dir / "corpus.jsonl").read_text().splitlines()
    summary = json.loads((cfg.output_dir / "attack_summary.json").read_text())
    records = [json.loads(line) for line in lines]
    assert len(records) == summary["attempted"]
    assert [r["seed_id"] for r in records] == sorted(r["seed_id"] for r in records)
    assert summary["yield_rate"] == summary["successful"] / summary["attempted"]
    assert summary["successful"] == sum(r["success"] for r in records) > 0
    assert all(r["config_hash"] == cfg.attack_hash for r in records)


def test_successes_reverify(pipeline):
    cfg, _ = pipeline
    model = load_checkpoint(cfg.output_dir / "checkpoint.lpck")
    test = load_idx(*cfg.dataset_paths("test"), 10)
    for line in (cfg.output_dir / "corpus.jsonl").read_text().splitlines():
        ex = example_from_record(json.loads(line))
        assert np.abs(ex.perturbation).max() <= cfg.attack.delta + 1e-7
        s = test.images[ex.seed_id]
        assert model.classify(s) == test.labels[ex.seed_id] == ex.original_label
        if ex.success:
            label = model.classify(np.clip(s + ex.perturbation, 0, 1))
            assert label == ex.adversarial_label != ex.original_label


def test_deviation_rows_are_cartesian(pipeline):
    cfg, _ = pipeline
    rows = read_csv(cfg.output_dir / "deviations.csv")
    summary = json.loads((cfg.output_dir / "summary.json").read_text())
    n_layers, n_strengths = len(summary["layers"]), len(cfg.attack.ratios)
    assert len(rows) == summary["successful"] * n_strengths * n_layers
    assert list(rows[0]) == ["seed_id", "strength", "layer", "D_a", "D_g", "compromised"]
    thr = summary["thresholds"]
    for r in rows:
        key = f"{float(r['strength']):g}"
        assert int(r["compromised"]) == (float(r["D_a"]) < thr[key][r["layer"]])


def test_report_consistency(pipeline):
    cfg, _ = pipeline
    out = cfg.output_dir
    summary = json.loads((out / "summary.json").read_text())
    text = (out / "summary.txt").read_text()
    named = text.split("most vulnerable layers: ")[1].splitlines()[0].split(", ")
    assert len(named) == 2 and set(named) <= set(summary["layers"]) and named == summary["ranking"][:2]
    for r in read_csv(out / "figures" / "fig6_compromise_probability.csv"):
        assert float(r["probability"]) == summary["compromise_probability"][r["strength"]][r["layer"]]
    for r in read_csv(out / "figures" / "fig4_mean_similarity.csv"):
        assert float(r["mean_D_a"]) == summary["mean_d_adv"][r["strength"]][r["layer"]]
    hist = {}
    for r in read_csv(out / "figures" / "fig7_compromised_layers.csv"):
        hist.setdefault(r["strength"], []).append(int(r["examples"]))
    assert all(sum(b) == summary["successful"] for b in hist.values())
    pgms = sorted(p.name for p in (out / "gallery").glob("*.pgm"))
    seeds = {p.split("_")[0] for p in pgms}
    assert len(seeds) == cfg.raw["report"]["gallery_seeds"]
    assert len(pgms) == 3 * len(seeds) * len(summary["layers"])
    raw = (out / "gallery" / pgms[0]).read_bytes()
    assert raw.startswith(b"P5\n") and f"config_hash {cfg.config_hash}".encode() in raw
    grids = [json.loads(line) for line in (out / "gallery" / "heatmaps.jsonl").read_text().splitlines()]
    assert len(grids) == len(pgms)


def test_manifests_reference_config_hash(pipeline):
    cfg, _ = pipeline
    out = cfg.output_dir
    listed = set()
    for command in ("train", "attack", "analyze", "report"):
        manifest = json.loads((out / f"manifest-{command}.json").read_text())
        assert manifest["config_hash"] == cfg.config_hash
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
            listed.add(name)
    produced = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest-")}
    assert produced == listed
    assert not [p for p in out.rglob(".*")], "temporary files left behind"


def test_analyze_rejects_foreign_corpus(pipeline, tmp_path):
    cfg, path = pipeline
    shutil.copytree(cfg.output_dir, tmp_path / "o")
    doc = json.loads(path.read_text())
    doc["attack"]["delta"] = 0.05
    doc["output_dir"] = str(tmp_path / "o")
    before = (tmp_path / "o" / "summary.json").read_bytes()
    assert cli.main(["analyze", "--config", str(dump_config(tmp_path / "c.json", doc))]) == 1
    assert (tmp_path / "o" / "summary.json").read_bytes() == before


def test_parallel_analysis_matches_serial(pipeline, tmp_path, monkeypatch):
    cfg, path = pipeline
    shutil.copytree(cfg.output_dir, tmp_path / "o")
    monkeypatch.setenv("LAYERPROBE_JOBS", "2")
    assert cli.main(["analyze", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    for name in ("deviations.csv", "summary.json"):
        assert (tmp_path / "o" / name).read_bytes() == (cfg.output_dir / name).read_bytes()
