import json
import subprocess
import sys

import numpy as np
import pytest

from _helpers import tiny_spec
from colontcn import cli, data, train
from colontcn.checkpoint import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(tiny_spec().to_dict()))
    assert run("synth", "--config", spec, "--n", 10, "--seed", 3, "--out", root / "ds") == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = {
        "model": {"levels": 3, "channels": 8, "kernel_size": 3},
        "optim": {"total_iters": 6, "batch_size": 1, "burn_in_iters": 2, "eval_every": 2, "lr0": 5e-3},
        "seed": 1,
    }
    path = dataset / "train.json"
    path.write_text(json.dumps(cfg))
    out = dataset / "run"
    code = run("train", "--config", path, "--manifest", dataset / "ds" / "manifest.json",
               "--fold", 0, "--out", out)
    assert code == 0
    return out


def test_synth_writes_dataset(dataset):
    m = data.Manifest.load(dataset / "ds" / "manifest.json")
    assert len(m.videos) == 10 and m.feature_dim == 6
    for v in m.videos:
        assert (dataset / "ds" / v.features).exists() and (dataset / "ds" / v.annotations).exists()
        assert set(v.folds) == {"5fold", "4fold"}
    assert run("folds-validate", dataset / "ds" / "folds_5fold.json",
               "--manifest", dataset / "ds" / "manifest.json") == 0
    assert run("folds-validate", dataset / "ds" / "folds_4fold.json",
               "--manifest", dataset / "ds" / "manifest.json") == 0


def test_synth_is_byte_identical(dataset, tmp_path):
    spec = dataset / "spec.json"
    run("synth", "--config", spec, "--n", 10, "--seed", 3, "--out", tmp_path / "again")
    assert data.dataset_sha(tmp_path / "again") == data.dataset_sha(dataset / "ds")
    run("synth", "--config", spec, "--n", 10, "--seed", 4, "--out", tmp_path / "other")
    assert data.dataset_sha(tmp_path / "other") != data.dataset_sha(dataset / "ds")


def test_synth_zero_videos(tmp_path):
    assert run("synth", "--n", 0, "--out", tmp_path / "empty") == 0
    m = data.Manifest.load(tmp_path / "empty" / "manifest.json")
    assert m.videos == []


def test_synth_bad_spec(tmp_path):
    (tmp_path / "s.json").write_text('{"noise": -1}')
    assert run("synth", "--config", tmp_path / "s.json", "--n", 1, "--out", tmp_path / "x") == 2
    (tmp_path / "s.json").write_text('{"colour": 1}')
    assert run("synth", "--config", tmp_path / "s.json", "--n", 1, "--out", tmp_path / "x") == 2


def test_train_artifacts_and_config_echo(trained, dataset):
    for name in ("best.ckpt", "last.ckpt", "history.jsonl", "valid_report.json", "test_report.json"):
        assert (trained / "fold0" / name).exists()
    echo = json.loads((trained / "config.json").read_text())
    expected = cli.load_config(dataset / "train.json", {
        "out": str(trained), "data": {"manifest": str(dataset / "ds" / "manifest.json")}, "folds": {"fold": "0"}})
    assert echo == expected
    hist = train.read_history(trained / "fold0" / "history.jsonl")
    assert [h["iter"] for h in hist if "loss" in h] == list(range(1, 7))
    cv = json.loads((trained / "cv_report.json").read_text())
    assert cv["folds"] == 1 and "params" in cv


def test_eval_reproduces_validation_score(trained, dataset, tmp_path):
    out = tmp_path / "eval.json"
    code = run("eval", "--checkpoint", trained / "fold0" / "best.ckpt",
               "--manifest", dataset / "ds" / "manifest.json", "--split", "valid", "--out", out)
    assert code == 0
    doc = json.loads(out.read_text())
    ckpt = load_checkpoint(trained / "fold0" / "best.ckpt")
    assert abs(doc["wF1"] - ckpt.val_wf1) < 1e-9
    assert len(doc["f1"]) == 9
    assert list(doc["f1"]) == ["outside", "insertion", "cecum", "ileum", "ascending",
                               "transverse", "descending", "sigmoid", "rectum"]
    assert doc["params"] > 0 and doc["gflops_reference"] > 0
    test_doc = json.loads((trained / "fold0" / "test_report.json").read_text())
    run("eval", "--checkpoint", trained / "fold0" / "best.ckpt",
        "--manifest", dataset / "ds" / "manifest.json", "--out", out)
    assert json.loads(out.read_text())["wF1"] == test_doc["wF1"]


def test_eval_dimension_mismatch(trained, tmp_path):
    seqs = data.generate_synthetic(tiny_spec(feature_dim=4), 2, np.random.default_rng(0))
    data.write_dataset(seqs, tmp_path / "d4")
    code = run("eval", "--checkpoint", trained / "fold0" / "best.ckpt",
               "--manifest", tmp_path / "d4" / "manifest.json")
    assert code == 2


def test_predict_outputs(trained, dataset, tmp_path):
    feats = sorted((dataset / "ds" / "features").glob("*.ctcnfeat"))[:2]
    ck = trained / "fold0" / "best.ckpt"
    assert run("predict", "--checkpoint", ck, "--probs", "--out", tmp_path / "a", *feats) == 0
    assert run("predict", "--checkpoint", ck, "--probs", "--out", tmp_path / "b", *feats) == 0
    for f in feats:
        vid = f.stem
        T = data.load_features(f).num_frames
        labels = cli.read_label_file(tmp_path / "a" / f"{vid}.labels.csv")
        probs = np.loadtxt(tmp_path / "a" / f"{vid}.probs.csv", delimiter=",")
        assert labels.size == T and probs.shape == (T, 9)
        np.testing.assert_array_equal(labels, probs.argmax(axis=1))
        for suffix in (".labels.csv", ".probs.csv"):
            assert (tmp_path / "a" / f"{vid}{suffix}").read_bytes() == (tmp_path / "b" / f"{vid}{suffix}").read_bytes()


def test_predict_dimension_mismatch(trained, tmp_path):
    p = tmp_path / "x.ctcnfeat"
    data.save_features(data.FeatureSequence("x", 5.0, np.zeros((5, 3), np.float32)), p)
    assert run("predict", "--checkpoint", trained / "fold0" / "best.ckpt", "--out", tmp_path, p) == 2


def test_train_exit_codes(dataset, tmp_path):
    manifest = dataset / "ds" / "manifest.json"
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"depth": 3}}')
    assert run("train", "--config", bad, "--manifest", manifest, "--out", tmp_path / "r") == 2
    bad.write_text("{not json")
    assert run("train", "--config", bad, "--manifest", manifest, "--out", tmp_path / "r") == 2
    assert run("train", "--out", tmp_path / "r") == 2

    # missing feature file -> data error naming it
    broken = tmp_path / "broken"
    seqs = data.generate_synthetic(tiny_spec(), 10, np.random.default_rng(0))
    m = data.write_dataset(seqs, broken)
    (broken / m.videos[0].features).unlink()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"levels": 2, "channels": 4, "kernel_size": 3},
                               "optim": {"total_iters": 2, "batch_size": 1, "burn_in_iters": 0, "eval_every": 2}}))
    assert run("train", "--config", cfg, "--manifest", broken / "manifest.json", "--fold", "all",
               "--out", tmp_path / "r") == 3

    # divergence -> numeric failure
    cfg.write_text(json.dumps({"model": {"levels": 2, "channels": 4, "kernel_size": 3},
                               "optim": {"total_iters": 3, "batch_size": 1, "burn_in_iters": 0,
                                         "eval_every": 3, "lr0": 1e300, "lr_final": 1e300}}))
    with np.errstate(all="ignore"):
        assert run("train", "--config", cfg, "--manifest", manifest, "--fold", 0, "--out", tmp_path / "r") == 4


def test_missing_feature_message_names_file(tmp_path, capsys):
    seqs = data.generate_synthetic(tiny_spec(), 1, np.random.default_rng(0))
    m = data.write_dataset(seqs, tmp_path)
    (tmp_path / m.videos[0].features).unlink()
    with pytest.raises(data.DataError, match="synth000.ctcnfeat"):
        data.Manifest.load(tmp_path / "manifest.json").load_video("synth000")


def test_profile(tmp_path, capsys):
    out = tmp_path / "p.json"
    assert run("profile", "--out", out, "--T", 2500, 8000) == 0
    doc = json.loads(out.read_text())
    assert doc["params"] == 880_521
    assert doc["receptive_field"] == 98_293
    assert abs(doc["gflops"]["2500"] - 4.386) < 1e-3
    cfg = tmp_path / "c.json"
    cfg.write_text('{"model": {"levels": 11}}')
    run("profile", "--config", cfg, "--out", out)
    assert json.loads(out.read_text())["receptive_field"] == 24_565
    cfg.write_text('{"model": {"levels": 14, "double_conv": false, "residual": false}}')
    run("profile", "--config", cfg, "--out", out)
    doc = json.loads(out.read_text())
    assert doc["receptive_field"] == 98_299 and round(doc["params"] / 1e6, 2) == 0.53


def test_render(tmp_path):
    gt = data.segmentize(np.array([0] * 5 + [1] * 10 + [4] * 5), "v")
    (tmp_path / "gt.csv").write_text(data.format_annotations(gt))
    (tmp_path / "m.labels.csv").write_text(
        "frame,label\n" + "".join(f"{t},{'cecum' if t < 8 else 'rectum'}\n" for t in range(20)))
    out = tmp_path / "t.svg"
    assert run("render", "--out", out, tmp_path / "gt.csv", tmp_path / "m.labels.csv") == 0
    svg = out.read_text()
    assert svg.startswith("<svg") and 'data-name="m"' in svg
    starts = [int(s.split('"')[0]) for s in svg.split('data-start="')[1:]]
    assert starts == [0, 5, 15, 0, 8]
    (tmp_path / "short.labels.csv").write_text("frame,label\n0,cecum\n")
    assert run("render", "--out", out, tmp_path / "gt.csv", tmp_path / "short.labels.csv") == 3
    assert run("render", "--out", out, tmp_path / "missing.csv") == 3


def test_folds_validate_rejects_overlap(tmp_path):
    folds = [train.FoldSpec(0, ["a", "b"], ["c"], ["b"])]
    train.save_folds(folds, tmp_path / "f.json")
    assert run("folds-validate", tmp_path / "f.json") == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "colontcn.cli", "profile", "--config", "/nonexistent.json"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "config error" in r.stderr
