import json

import pytest
import torch
import yaml

from pseudoseg import cli
from pseudoseg.config import ExperimentConfig
from pseudoseg.data import DatasetSplit, class_pixel_counts
from pseudoseg.experiments import STUDIES, config_diff, load_data, study_arms

SMALL = {
    "data": {"num_train": 48, "num_val": 8, "fraction": "1/6"},
    "train": {"iterations": 4, "eval_every": 2, "labeled_batch": 2, "unlabeled_batch": 2},
    "model": {"backbone": "tiny"},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_make_splits_deterministic_and_covering(tmp_path, small_config):
    out = tmp_path / "splits"
    assert run("make-splits", "--config", small_config, "--out", out) == 0
    files = sorted(out.glob("split_seed*.json"))
    assert [f.name for f in files] == ["split_seed1.json", "split_seed2.json", "split_seed3.json"]
    first = {f.name: f.read_bytes() for f in files}
    assert run("make-splits", "--config", small_config, "--out", out) == 0
    assert {f.name: f.read_bytes() for f in files} == first

    cfg = ExperimentConfig.from_dict(SMALL)
    train = load_data(cfg).train
    for f in files:
        split = DatasetSplit.from_json(f.read_text())
        assert len(split.labeled_ids) == 8
        counts = sum(class_pixel_counts(train.mask_by_id(i), 4) for i in split.labeled_ids)
        assert (counts >= cfg.data.min_class_pixels).all()


def test_make_splits_full_fraction_single_file(tmp_path, small_config):
    out = tmp_path / "full"
    assert run("make-splits", "--config", small_config, "--set", "data.fraction=1", "--out", out) == 0
    files = list(out.glob("*.json"))
    assert len(files) == 1
    split = DatasetSplit.from_json(files[0].read_text())
    assert len(split.labeled_ids) == 48 and not split.unlabeled_ids


def test_train_writes_outputs_and_all_losses(tmp_path, small_config):
    out = tmp_path / "run"
    assert run("train", "--config", small_config, "--seed", 2, "--out", out) == 0
    assert {"config.yaml", "metrics.jsonl", "best.ckpt", "final.ckpt"} <= {p.name for p in out.iterdir()}
    resolved = ExperimentConfig.from_dict(yaml.safe_load((out / "config.yaml").read_text()))
    assert resolved.train.seed == 2 and resolved.data.split_seed == 2
    lines = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [2, 4]
    for r in lines:
        for key in ("l_s", "l_u", "l_x", "l_sa", "miou", "ece"):
            assert key in r
        assert r["l_u"] > 0 and r["l_sa"] > 0 and r["l_x"] > 0


def test_periodic_checkpoints(tmp_path, small_config):
    out = tmp_path / "ck"
    args = ("train", "--config", small_config, "--mode", "supervised_only", "--out", out)
    assert run(*args, "--set", "train.checkpoint_every=2") == 0
    assert sorted(p.name for p in out.glob("iter_*.ckpt")) == ["iter_000002.ckpt", "iter_000004.ckpt"]
    line = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert line["l_u"] == 0 and line["l_sa"] == 0


def test_eval_matches_training_final(tmp_path, small_config):
    out = tmp_path / "ev"
    assert run("train", "--config", small_config, "--out", out) == 0
    last = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert run("eval", "--config", small_config, "--checkpoint", out / "final.ckpt", "--out", out) == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["miou"] == last["miou"]
    assert report["per_class_iou"] == last["per_class_iou"]
    assert report["ece"] == last["ece"]


def test_eval_missing_checkpoint(tmp_path, small_config, capsys):
    assert run("eval", "--config", small_config, "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == cli.EXIT_DATA
    assert "nope.ckpt" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra",
    [
        ("--set", "fusion.gamma=1.5"),
        ("--set", "train.bogus=1"),
        ("--set", "nosuch.block=1"),
        ("--set", "train.iterations=abc"),
        ("--set", "noequals"),
    ],
)
def test_config_errors_exit_2(tmp_path, small_config, extra, capsys):
    assert run("train", "--config", small_config, "--out", tmp_path / "x", *extra) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "x" / "metrics.jsonl").exists()


def test_config_errors_name_the_field(tmp_path, small_config, capsys):
    run("train", "--config", small_config, "--set", "train.bogus=1")
    assert "bogus" in capsys.readouterr().err


def test_missing_or_bad_config_file(tmp_path):
    assert run("train", "--config", tmp_path / "missing.yaml") == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [1, 2\n")
    assert run("train", "--config", bad) == cli.EXIT_CONFIG


def test_data_error_exit_3(tmp_path):
    cfg = {"data": {"source": "voc_dir", "root": str(tmp_path / "nothing")}}
    path = tmp_path / "voc.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run("make-splits", "--config", path, "--out", tmp_path) == cli.EXIT_DATA


def test_nan_exit_4(tmp_path, small_config, capsys):
    code = run("train", "--config", small_config, "--set", "train.base_lr=1.0e+30", "--out", tmp_path / "nan")
    assert code == cli.EXIT_NAN
    assert "batch ids" in capsys.readouterr().err


@pytest.mark.parametrize("study", sorted(STUDIES))
def test_ablation_arms_differ_only_in_swept_field(study):
    base = ExperimentConfig()
    for (name, arm), (_, overrides) in zip(study_arms(base, study), STUDIES[study]):
        assert set(config_diff(base, arm)) <= set(overrides), name


def test_unknown_study(small_config, tmp_path):
    assert run("ablate", "--config", small_config, "--study", "nope", "--out", tmp_path) == cli.EXIT_CONFIG


def test_ablate_writes_tables(tmp_path, small_config):
    out = tmp_path / "ab"
    assert run("ablate", "--config", small_config, "--study", "sharpening", "--seed", 1, "--out", out) == 0
    rows = json.loads((out / "sharpening.json").read_text())
    assert [r["arm"] for r in rows] == ["T=0.5", "T=1"]
    assert (out / "sharpening.csv").read_text().startswith("study,arm,seed,miou")


def test_selftrain_table(tmp_path, small_config):
    out = tmp_path / "st"
    assert run("selftrain", "--config", small_config, "--seed", 1, "--out", out) == 0
    rows = json.loads((out / "selftrain.json").read_text())
    assert {r["row"] for r in rows} == {"teacher", "student", "pseudoseg"}
    assert all(0 <= r["miou"] <= 1 for r in rows)


def test_deterministic_metrics_stream(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(cli.DETERMINISTIC_ENV, "1")
    try:
        for name in ("a", "b"):
            assert run("train", "--config", small_config, "--seed", 3, "--out", tmp_path / name) == 0
    finally:
        torch.use_deterministic_algorithms(False)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
