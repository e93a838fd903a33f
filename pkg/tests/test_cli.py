"""End-to-end tests for the command line driver.

Everything runs in-process through run_command so exit codes and output
files can be asserted without subprocesses. A miniature geometry keeps
the train step around a second.
"""

import json
import os
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from mmae.cli import run_command
from mmae.data import EcgRecord, ManifestEntry, save_record, write_manifest

MINI_CONFIG = {
    "model": {"n_leads": 2, "segment_len": 10, "n_segments": 8, "region_len": 2,
              "region_offsets": [1, 3, 5], "embed_dim": 16, "decoder_dim": 16,
              "n_blocks": 1, "n_heads": 4, "n_decoder_heads": 2, "mlp_ratio": 2,
              "mask_ratio": 0.25},
    "train": {"epochs": 2, "batch_size": 4, "base_lr": 1e-3,
              "warmup_epochs": 1, "seed": 0},
    "infer": {"n_passes": 2},
    "data": {"fs": 40, "duration": 2.0, "n_leads": 2, "n_normal": 6,
             "n_abnormal": 3, "n_test_normal": 3, "noise_std": 0.02},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(MINI_CONFIG))
    return root


@pytest.fixture(scope="module")
def config_path(workdir):
    return str(workdir / "cfg.json")


@pytest.fixture(scope="module")
def corpus(workdir, config_path):
    for var in ("MMAE_SEED", "MMAE_THREADS"):
        os.environ.pop(var, None)
    out = workdir / "corpus"
    code = run_command(["synth", "--config", config_path,
                        "--out", str(out), "--seed", "7"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(workdir, config_path, corpus):
    ckpt = workdir / "model.ckpt"
    code = run_command(["train", "--config", config_path,
                        "--data", str(corpus / "train_manifest.json"),
                        "--out", str(ckpt),
                        "--history", str(workdir / "hist.jsonl"),
                        "--quiet"])
    assert code == 0
    return ckpt


def test_help_and_version_exit_zero(capsys):
    assert run_command(["--help"]) == 0
    assert "synth" in capsys.readouterr().out
    assert run_command(["--version"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.count(".") == 2


def test_unknown_command_exits_two(capsys):
    assert run_command(["defragment"]) == 2


def test_missing_required_flag_exits_two(capsys):
    assert run_command(["synth"]) == 2
    assert run_command(["score", "--model", "x.ckpt"]) == 2


def test_synth_layout(corpus):
    train = sorted(p.name for p in (corpus / "train").glob("*.ecgb"))
    test = sorted(p.name for p in (corpus / "test").glob("*.ecgb"))
    assert len(train) == 6
    assert len(test) == 6
    assert train[0] == "train-normal-0000.ecgb"
    assert "test-abnormal-0000.ecgb" in test
    assert (corpus / "train_manifest.json").exists()
    assert (corpus / "test_manifest.json").exists()
    # abnormal records ship a ground-truth mask sidecar
    assert (corpus / "test" / "test-abnormal-0000.mask").exists()
    assert not (corpus / "test" / "test-normal-0000.mask").exists()


def test_synth_count_overrides(workdir, config_path):
    out = workdir / "tiny"
    code = run_command(["synth", "--config", config_path, "--out", str(out),
                        "--n-normal", "2", "--n-abnormal", "1",
                        "--n-test-normal", "1", "--seed", "7"])
    assert code == 0
    assert len(list((out / "train").glob("*.ecgb"))) == 2
    assert len(list((out / "test").glob("*.ecgb"))) == 2


def _corpus_bytes(root: Path) -> bytes:
    blob = b""
    for path in sorted(root.rglob("*.ecgb")):
        blob += path.read_bytes()
    return blob


def test_seed_precedence_flag_env_config(workdir, config_path, monkeypatch):
    def synth(tag, seed_args):
        out = workdir / f"seed-{tag}"
        assert run_command(["synth", "--config", config_path, "--out", str(out),
                            "--n-normal", "2", "--n-abnormal", "0",
                            "--n-test-normal", "0"] + seed_args) == 0
        return _corpus_bytes(out)

    monkeypatch.delenv("MMAE_SEED", raising=False)
    by_flag = synth("flag", ["--seed", "5"])
    by_config = synth("cfg", [])          # falls back to train.seed = 0
    monkeypatch.setenv("MMAE_SEED", "5")
    by_env = synth("env", [])
    monkeypatch.setenv("MMAE_SEED", "9")
    flag_beats_env = synth("both", ["--seed", "5"])

    assert by_env == by_flag
    assert flag_beats_env == by_flag
    assert by_config != by_flag


def test_bad_env_seed_exits_two(workdir, config_path, monkeypatch):
    monkeypatch.setenv("MMAE_SEED", "many")
    code = run_command(["synth", "--config", config_path,
                        "--out", str(workdir / "never")])
    assert code == 2


def test_missing_config_exits_two(workdir):
    code = run_command(["synth", "--config", str(workdir / "absent.json"),
                        "--out", str(workdir / "never")])
    assert code == 2


def test_unknown_config_key_exits_two(workdir):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": 1, "nesterov": True}}))
    code = run_command(["synth", "--config", str(bad),
                        "--out", str(workdir / "never")])
    assert code == 2


def test_train_artifacts(workdir, checkpoint):
    assert checkpoint.read_bytes()[:4] == b"MMAE"
    lines = (workdir / "hist.jsonl").read_text().strip().splitlines()
    assert len(lines) == MINI_CONFIG["train"]["epochs"]
    row = json.loads(lines[0])
    assert set(row) >= {"epoch", "mean_loss", "lr"}


def test_train_progress_goes_to_stderr(workdir, config_path, corpus, capsys):
    code = run_command(["train", "--config", config_path,
                        "--data", str(corpus / "train_manifest.json"),
                        "--out", str(workdir / "verbose.ckpt")])
    assert code == 0
    captured = capsys.readouterr()
    assert "epoch" in captured.err
    assert captured.out == ""


def test_train_missing_manifest_exits_one(workdir, config_path):
    code = run_command(["train", "--config", config_path,
                        "--data", str(workdir / "absent_manifest.json"),
                        "--out", str(workdir / "never.ckpt")])
    assert code == 1


def test_score_report(workdir, corpus, checkpoint):
    report = workdir / "score.json"
    rec = corpus / "test" / "test-abnormal-0000.ecgb"
    code = run_command(["score", "--model", str(checkpoint),
                        "--input", str(rec), "--report", str(report),
                        "--passes", "2", "--seed", "3"])
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["id"] == "test-abnormal-0000"
    assert doc["n_passes"] == 2
    assert doc["n_regions"] == 3
    assert len(doc["breakdown"]) == 2 * 3
    scores = np.asarray(doc["point_scores"])
    assert scores.shape == (2, 80)
    assert np.isfinite(scores).all() and (scores >= 0).all()
    assert doc["sample_score"] > 0


def test_score_is_deterministic(workdir, corpus, checkpoint):
    rec = corpus / "test" / "test-normal-0000.ecgb"
    blobs = []
    for name in ("det_a.json", "det_b.json"):
        path = workdir / name
        assert run_command(["score", "--model", str(checkpoint),
                            "--input", str(rec), "--report", str(path),
                            "--seed", "11"]) == 0
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]


def test_score_svg_options(workdir, corpus, checkpoint):
    svg = workdir / "fig.svg"
    code = run_command(["score", "--model", str(checkpoint),
                        "--input", str(corpus / "test" / "test-abnormal-0001.ecgb"),
                        "--report", str(workdir / "fig.json"),
                        "--svg", str(svg),
                        "--leads", "L1", "--window", "0:40"])
    assert code == 0
    tree = ET.parse(svg)
    ns = {"svg": "http://www.w3.org/2000/svg"}
    polylines = tree.getroot().findall(".//svg:polyline", ns)
    assert len(polylines) == 1
    points = polylines[0].get("points").split()
    assert len(points) == 40


def test_score_bad_leads_and_window_exit_two(workdir, corpus, checkpoint):
    base = ["score", "--model", str(checkpoint),
            "--input", str(corpus / "test" / "test-normal-0001.ecgb"),
            "--report", str(workdir / "junk.json"), "--svg",
            str(workdir / "junk.svg")]
    assert run_command(base + ["--leads", "L9"]) == 2
    assert run_command(base + ["--leads", "zero"]) == 2
    assert run_command(base + ["--window", "10"]) == 2
    assert run_command(base + ["--window", "a:b"]) == 2


def test_score_missing_model_exits_one(workdir, corpus):
    code = run_command(["score", "--model", str(workdir / "absent.ckpt"),
                        "--input", str(corpus / "test" / "test-normal-0000.ecgb"),
                        "--report", str(workdir / "junk.json")])
    assert code == 1


def test_eval_report_and_stdout(workdir, corpus, checkpoint, capsys):
    report = workdir / "eval.json"
    code = run_command(["eval", "--model", str(checkpoint),
                        "--manifest", str(corpus / "test_manifest.json"),
                        "--report", str(report),
                        "--passes", "2", "--localization"])
    assert code == 0
    out = capsys.readouterr().out
    assert "detection_auroc" in out and "localization_auroc" in out
    doc = json.loads(report.read_text())
    assert 0.0 <= doc["detection_auroc"] <= 1.0
    assert 0.0 <= doc["localization_auroc"] <= 1.0
    assert doc["n_normal"] == 3 and doc["n_abnormal"] == 3
    assert len(doc["per_record"]) == 6


def test_eval_thread_env_cap(workdir, corpus, checkpoint, monkeypatch, capsys):
    monkeypatch.setenv("MMAE_THREADS", "2")
    code = run_command(["eval", "--model", str(checkpoint),
                        "--manifest", str(corpus / "test_manifest.json"),
                        "--report", str(workdir / "eval_mt.json"),
                        "--passes", "2", "--threads", "8"])
    assert code == 0
    a = json.loads((workdir / "eval.json").read_text())
    b = json.loads((workdir / "eval_mt.json").read_text())
    assert a["detection_auroc"] == b["detection_auroc"]


def test_bad_thread_env_exits_two(workdir, corpus, checkpoint, monkeypatch):
    monkeypatch.setenv("MMAE_THREADS", "lots")
    code = run_command(["eval", "--model", str(checkpoint),
                        "--manifest", str(corpus / "test_manifest.json"),
                        "--report", str(workdir / "junk.json")])
    assert code == 2


def test_eval_localization_without_masks_exits_two(workdir, checkpoint, capsys):
    rng = np.random.default_rng(0)
    (workdir / "plain").mkdir(exist_ok=True)
    entries = []
    for i, label in enumerate(["normal", "abnormal"]):
        rec = EcgRecord(id=f"plain-{i}",
                        signal=rng.normal(size=(2, 80)).astype(np.float32),
                        fs=40, label=label)
        path = save_record(rec, workdir / "plain" / f"plain-{i}.ecgb")
        entries.append(ManifestEntry(path=path, label=label))
    manifest = write_manifest(workdir / "plain" / "manifest.json", entries)
    code = run_command(["eval", "--model", str(checkpoint),
                        "--manifest", str(manifest),
                        "--report", str(workdir / "junk.json"),
                        "--passes", "1", "--localization"])
    assert code == 2


def test_gradcheck_quick(capsys):
    assert run_command(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "attention" in out and "ok" in out


def test_ablate_two_variants(workdir, config_path, capsys):
    out = workdir / "ablate.json"
    code = run_command(["ablate", "--config", config_path,
                        "--variants", "full,global_only",
                        "--out", str(out), "--quiet"])
    assert code == 0
    doc = json.loads(out.read_text())
    assert set(doc["variants"]) == {"full", "global_only"}
    for row in doc["variants"].values():
        assert 0.0 <= row["detection_auroc"] <= 1.0


def test_ablate_unknown_variant_exits_two(workdir, config_path):
    code = run_command(["ablate", "--config", config_path,
                        "--variants", "full,cropped",
                        "--out", str(workdir / "junk.json"), "--quiet"])
    assert code == 2


def test_ablate_half_data_flags_exit_two(workdir, config_path, corpus):
    code = run_command(["ablate", "--config", config_path,
                        "--variants", "full",
                        "--data-train", str(corpus / "train_manifest.json"),
                        "--out", str(workdir / "junk.json"), "--quiet"])
    assert code == 2
