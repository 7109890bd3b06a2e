import json
import os

import numpy as np
import pytest

from dualloss import cli
from dualloss.config import TrainConfig
from dualloss.data.images import encode_ppm

FAST = ["--set", "synth.per_class=30", "--set", "synth.dim=16", "--set", "train.hidden_dim=64",
        "--set", "train.embedding_dim=32"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    d = tmp_path / "data"
    assert run(capsys, "synth", "--out", d, *FAST)[0] == 0
    return d


def test_synth_then_inspect(synth_dir, capsys):
    code, out, _ = run(capsys, "features", "inspect", synth_dir / "train.mfv")
    assert code == 0
    assert json.loads(out) == {"path": str(synth_dir / "train.mfv"), "N": 6 * 21, "F": 16, "C": 6}
    assert (synth_dir / "classes.txt").read_text().split() == [f"class_{k}" for k in range(6)]


def test_inspect_corrupt_magic(tmp_path, capsys):
    bad = tmp_path / "bad.mfv"
    bad.write_bytes(b"NOPE" + bytes(12))
    code, _, err = run(capsys, "features", "inspect", bad)
    assert code == 2 and "magic" in err


def test_missing_dataset_is_actionable(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out", tmp_path)
    assert code == 1 and "--data" in err
    code, _, err = run(capsys, "train", "--data", tmp_path / "nowhere", "--out", tmp_path)
    assert code == 2 and "does not exist" in err


def test_usage_and_config_errors(capsys, tmp_path):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "train", "--set", "train.bogus=1")[0] == 1
    assert run(capsys, "train", "--set", "noequals")[0] == 1
    assert run(capsys, "train", "--config", tmp_path / "missing.cfg")[0] == 1


def test_default_config_is_table2():
    args = cli.build_parser().parse_args(["train"])
    assert cli._run_config(args).train == TrainConfig()
    args = cli.build_parser().parse_args(["train", "--loss-mode", "ce"])
    assert cli._run_config(args).train == TrainConfig(loss_mode="ce")


def test_train_eval_consistency(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--data", synth_dir, "--epochs", 3, "--out", out, *FAST)
    assert code == 0
    for name in ("best.ckpt", "last.ckpt", "trainlog.jsonl", "timing.jsonl", "metrics_test.json",
                 "confusion_test.csv", "config.cfg"):
        assert (out / name).exists(), name
    records = [json.loads(line) for line in (out / "trainlog.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2, 3] and "wall_time" not in records[0]
    best_val = max(r["val_accuracy"] for r in records)
    code, stdout, _ = run(capsys, "eval", out / "best.ckpt", synth_dir, "--split", "validation", "--out", out)
    assert code == 0 and json.loads(stdout)["accuracy"] == best_val
    rows = (out / "confusion_validation.csv").read_text().splitlines()
    counts = np.array([[int(v) for v in r.split(",")[1:]] for r in rows[1:]])
    # 30 per class split 21 / 4 / 5 (round(4.5) == 4)
    assert counts.sum(axis=1).tolist() == [4] * 6


def test_eval_empty_split_and_class_mismatch(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "train", "--data", synth_dir, "--epochs", 1, "--out", out, *FAST)[0] == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    from dualloss.data import DatasetSplit, write_features
    write_features(empty / "test.mfv", DatasetSplit((), tuple(f"class_{k}" for k in range(6)), "test"), 16)
    code, _, err = run(capsys, "eval", out / "best.ckpt", empty)
    assert code == 2 and "empty" in err
    other = tmp_path / "other"
    assert run(capsys, "synth", "--out", other, "--set", "synth.classes=3", *FAST)[0] == 0
    os.remove(other / "classes.txt")
    code, _, err = run(capsys, "eval", out / "best.ckpt", other)
    assert code == 2


def test_train_is_idempotent_and_resumable(synth_dir, tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d in (a, b):
        assert run(capsys, "train", "--data", synth_dir, "--epochs", 2, "--out", d, *FAST)[0] == 0
    for name in ("best.ckpt", "last.ckpt", "trainlog.jsonl", "metrics_test.json", "confusion_test.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert run(capsys, "train", "--data", synth_dir, "--epochs", 1, "--out", c, *FAST)[0] == 0
    assert run(capsys, "train", "--data", synth_dir, "--epochs", 2, "--out", c, "--resume", c, *FAST)[0] == 0
    for name in ("best.ckpt", "last.ckpt", "trainlog.jsonl"):
        assert (a / name).read_bytes() == (c / name).read_bytes(), name


def test_ablate_rows_and_determinism(tmp_path, capsys):
    outs = []
    for d in ("x", "y"):
        code, stdout, _ = run(capsys, "ablate", "--set", "data.source=synth", "--epochs", 1, "--out", tmp_path / d,
                              *FAST)
        assert code == 0
        outs.append((tmp_path / d / "ablation.csv").read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert [line.split(",")[0] for line in lines] == ["mode", "ce", "center", "arc", "arc+center"]


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--trials", 2)
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()] == ["ce", "arc", "center", "dual", "mlp", "cnn"]
    code, _, err = run(capsys, "gradcheck", "--trials", 2, "--perturb", "dual")
    assert code == 3 and "dual" in err and "worst entry" in err


def test_extract_feeds_precomputed_training(tmp_path, capsys):
    rng = np.random.default_rng(0)
    img = tmp_path / "img"
    for split, n in (("train", 4), ("validation", 2), ("test", 2)):
        for k, name in enumerate(("healthy", "blast")):
            os.makedirs(img / split / name)
            for i in range(n):
                px = np.clip(rng.random((3, 10, 10)) * 0.3 + 0.6 * k, 0, 1)
                (img / split / name / f"{i}.ppm").write_bytes(encode_ppm(px))
    small = ["--set", "train.hidden_dim=16", "--set", "train.embedding_dim=16", "--set", "augment.target_size=48"]
    cnn = tmp_path / "cnn"
    assert run(capsys, "train", "--data", img, "--set", "train.extractor=small-cnn", "--epochs", 1, "--out", cnn,
               *small)[0] == 0
    feats = tmp_path / "feats"
    for split in ("train", "validation", "test"):
        assert run(capsys, "features", "extract", "--checkpoint", cnn / "last.ckpt", "--images", img,
                   "--split", split, "--out", feats / f"{split}.mfv")[0] == 0
    code, out, _ = run(capsys, "features", "inspect", feats / "train.mfv")
    assert json.loads(out)["F"] == 32 and json.loads(out)["C"] == 2
    assert (feats / "classes.txt").read_text().split() == ["blast", "healthy"]
    code, _, _ = run(capsys, "train", "--data", feats, "--epochs", 1, "--out", tmp_path / "pre", *small)
    assert code == 0
    code, _, err = run(capsys, "features", "extract", "--checkpoint", tmp_path / "pre" / "last.ckpt",
                       "--images", img, "--out", tmp_path / "z.mfv")
    assert code == 1 and "small-cnn" in err
