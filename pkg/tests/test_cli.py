import json
import subprocess
import sys

import pytest

from lma.cli import build_parser, config_from_args, main

TINY = ["--dataset.n_concepts", "3", "--dataset.views_per_concept", "8", "--dataset.resolution", "16",
        "--model.width", "4", "--model.output_dim", "8", "--lma.embedder_dim", "8", "--hca.output_scale", "16",
        "--train.epochs", "1", "--train.batch_size", "8", "--probe.epochs", "2", "--evaluation.invariance_views", "2",
        "--evaluation.fid_samples", "0"]


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_dotted_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lma": {"alpha": 0.5, "mode": "mix"}, "train": {"epochs": 3}}))
    ns = build_parser().parse_args(["pretrain", "--config", str(path), "--lma.alpha", "0.2",
                                    "--dataset.factors", "hue", "scale", "--lma.n_views", "none",
                                    "--dataset.factor_ranges", "hue=-0.1,0.1", "scale=0.6,0.9"])
    cfg = config_from_args(ns)
    assert cfg.lma.alpha == 0.2 and cfg.lma.mode == "mix" and cfg.train.epochs == 3
    assert cfg.dataset.factors == ["hue", "scale"] and cfg.lma.n_views is None
    assert cfg.dataset.factor_ranges == {"hue": [-0.1, 0.1], "scale": [0.6, 0.9]}
    with pytest.raises(SystemExit):
        build_parser().parse_args(["pretrain", "--dataset.factor_ranges", "hue:wide"])


def test_invalid_config_exits_nonzero_with_json(capsys):
    code, out, err = run_cli(capsys, "pretrain", "--lma.alpha", "3", "--lma.mode", "nope")
    assert code == 2 and out == ""
    record = json.loads(err)
    assert record["error"] == "ConfigError"
    assert any("lma.alpha" in d for d in record["details"]) and any("lma.mode" in d for d in record["details"])


def test_bad_config_file(capsys, tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    code, _, err = run_cli(capsys, "pretrain", "--config", str(path))
    assert code == 2 and "not valid JSON" in json.loads(err)["message"]


def test_pretrain_probe_invariance_plot(capsys, artifact_root, tmp_path):
    code, out, _ = run_cli(capsys, "pretrain", *TINY)
    assert code == 0
    run = json.loads(out)["runs"][0]
    assert set(run) >= {"config_hash", "path", "top1", "top5", "orbit_cosine"}
    encoder = f"{run['path']}/encoder.pt"

    code, out, _ = run_cli(capsys, "probe", "--encoder", encoder, *TINY)
    assert code == 0 and 0 <= json.loads(out)["top1"] <= 100

    code, out, _ = run_cli(capsys, "invariance", "--encoder", encoder, *TINY)
    assert code == 0 and "orbit" in json.loads(out)["cosine"]

    code, out, _ = run_cli(capsys, "plot", run["path"], "--out", str(tmp_path / "plots"))
    assert code == 0 and any(p.endswith("invariance_radar.png") for p in json.loads(out)["plots"])


def test_missing_encoder_is_runtime_error(capsys, artifact_root, tmp_path):
    code, _, err = run_cli(capsys, "probe", "--encoder", str(tmp_path / "nope.pt"), *TINY)
    assert code == 1 and json.loads(err)["error"]


def test_sweep_verbs(capsys, artifact_root):
    code, out, _ = run_cli(capsys, "sweep-alpha", "--alphas", "0", "1", "--modes", "lma", *TINY)
    rows = json.loads(out)["rows"]
    assert code == 0 and [r["alpha"] for r in rows] == [0.0, 1.0]

    code, out, _ = run_cli(capsys, "sweep-views", "--counts", "2", "inf", "--lma.alpha", "1", *TINY)
    assert code == 0 and [r["n_views"] for r in json.loads(out)["rows"]] == [2, "inf"]

    code, out, _ = run_cli(capsys, "sweep-k", "--ks", "2", "--lma.backend", "knn", "--lma.alpha", "1", *TINY)
    assert code == 0 and json.loads(out)["rows"][0]["k"] == 2

    code, _, err = run_cli(capsys, "sweep-k", "--ks", "0", "--lma.backend", "knn", *TINY)
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lma.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("pretrain", "probe", "invariance", "sweep-alpha", "sweep-views", "sweep-k", "plot"):
        assert verb in res.stdout


def test_unknown_verb_exits_nonzero():
    with pytest.raises(SystemExit) as info:
        main(["train-everything"])
    assert info.value.code != 0
