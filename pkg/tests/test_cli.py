import json
import subprocess
import sys

import numpy as np
import pytest
import yaml
from filelock import FileLock

from awcl.cli import run

SYNTH = {"n_scans": 4, "frames_per_scan": 16, "image_size": [16, 16], "segment_length": 4, "seed": 1}
RUN = {"seed": 0, "model": {"backbone": "small-cnn", "feature_dim": 16, "width": 8},
       "sampler": {"batch_size": 8}, "train": {"epochs": 1}, "eval": {"epochs": 2, "milestones": [1]}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(yaml.safe_dump(SYNTH))
    (root / "run.yaml").write_text(yaml.safe_dump(RUN))
    assert run(["synth", "--spec", str(root / "synth.yaml"), "--out", str(root / "data")]) == 0
    return root


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("error: ")
    return err[0]


def test_synth_outputs(dataset):
    data = dataset / "data"
    assert (data / "manifest.tsv").is_file()
    assert (data / "synth.resolved.yaml").is_file()
    assert len((data / "manifest.tsv").read_text().splitlines()) == 1 + 4 * 16


def test_pretrain_probe_embed(dataset, tmp_path, capsys):
    cfg, data = str(dataset / "run.yaml"), str(dataset / "data" / "manifest.tsv")
    assert run(["pretrain", "--config", cfg, "--data", data, "--out", str(tmp_path / "pre")]) == 0
    resolved = yaml.safe_load((tmp_path / "pre" / "config.resolved.yaml").read_text())
    assert resolved["sampler"]["batch_size"] == 8
    assert resolved["output_dir"] == str(tmp_path / "pre")

    ckpt = str(tmp_path / "pre" / "last.pt")
    assert run(["probe", "--task", "2", "--from", ckpt, "--config", cfg, "--data", data,
                "--out", str(tmp_path / "probe")]) == 0
    report = json.loads((tmp_path / "probe" / "report.json").read_text())
    assert report["encoder_hash_before"] == report["encoder_hash_after"]
    assert set(report["summary"]) == {"macro_precision", "macro_recall", "macro_f1"}

    capsys.readouterr()
    assert run(["embed", "--from", ckpt, "--config", cfg, "--data", data, "--out", str(tmp_path / "emb"),
                "--tsne"]) == 0
    assert "silhouette" in capsys.readouterr().out
    rows = (tmp_path / "emb" / "embeddings.tsv").read_text().splitlines()
    assert len(rows) == 1 + 64


def test_metrics_from_confusion(tmp_path, capsys):
    np.save(tmp_path / "cm.npy", np.array([[5, 1], [2, 4]]))
    assert run(["metrics", "--confusion", str(tmp_path / "cm.npy"), "--out", str(tmp_path / "m.json")]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert float(out["macro_recall"]) == pytest.approx((5 / 6 + 4 / 6) / 2, abs=1e-6)
    assert json.loads((tmp_path / "m.json").read_text())["macro_recall"] == pytest.approx(0.75)


def test_usage_error():
    assert run(["finetune", "--task", "9", "--data", "x", "--out", "y"]) == 2
    assert run([]) == 2


def test_config_error(dataset, tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"sampler": {"anatomy_ratio": 1.5}}))
    code = run(["pretrain", "--config", str(tmp_path / "bad.yaml"), "--data",
                str(dataset / "data" / "manifest.tsv"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert _error_line(capsys).startswith("error: ConfigError: sampler.anatomy_ratio")


def test_missing_file(tmp_path, capsys):
    assert run(["pretrain", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")]) == 4
    assert "FileNotFoundError" in _error_line(capsys)


def test_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("not a manifest\n")
    assert run(["pretrain", "--data", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "o")]) == 5
    assert "ManifestError" in _error_line(capsys)


def test_locked_output(dataset, tmp_path, capsys):
    out = tmp_path / "busy"
    out.mkdir()
    with FileLock(str(out / ".awcl.lock")):
        code = run(["synth", "--spec", str(dataset / "synth.yaml"), "--out", str(out)])
    assert code == 7
    assert "OutputLocked" in _error_line(capsys)


def test_data_root_fallback(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("AWCL_DATA_ROOT", str(dataset))
    monkeypatch.chdir(tmp_path)
    assert run(["embed", "--config", "run.yaml", "--data", "data/manifest.tsv", "--out", "e.tsv"]) == 0
    assert (tmp_path / "e.tsv").is_file()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "awcl", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("awcl ")
