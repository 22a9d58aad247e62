"""Experiment orchestration shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .config import ConfigError, ExperimentConfig
from .data import (
    DatasetSplit,
    SegDataset,
    ShapesDataset,
    Subset,
    load_voc_directory,
    sample_low_data_split,
)
from .training import (
    LossReport,
    PseudoLabeledDataset,
    Trainer,
    evaluate,
    generate_offline_pseudo_labels,
    train_student,
)

log = logging.getLogger(__name__)

_CACHE: dict = {}


@dataclass
class DataBundle:
    train: SegDataset
    val: SegDataset
    split: DatasetSplit
    labeled: SegDataset
    unlabeled: SegDataset


def load_data(cfg: ExperimentConfig) -> DataBundle:
    """Train/val datasets and the class-covering low-data split for ``cfg``.

    Shapes datasets are memoised per process since arms of a study share them.
    """
    d = cfg.data
    key = (d.source, d.root, tuple(d.canvas), d.num_train, d.num_val, d.data_seed, cfg.model.num_classes, d.hue_noise, tuple(d.shape_size), d.illumination)
    if key not in _CACHE:
        if d.source == "shapes":
            train = ShapesDataset(d.num_train, d.data_seed, d.canvas, cfg.model.num_classes, hue_noise=d.hue_noise, shape_size=d.shape_size, illumination=d.illumination)
            val = ShapesDataset(d.num_val, d.data_seed + 10_000, d.canvas, cfg.model.num_classes, prefix="val", hue_noise=d.hue_noise, shape_size=d.shape_size, illumination=d.illumination)
        else:
            train = load_voc_directory(d.root, "train", cfg.model.num_classes)
            val = load_voc_directory(d.root, "val", cfg.model.num_classes)
        _CACHE[key] = (train, val)
    train, val = _CACHE[key]
    split = make_split(cfg, train)
    return DataBundle(train, val, split, Subset(train, split.labeled_ids), Subset(train, split.unlabeled_ids))


def make_split(cfg: ExperimentConfig, train: SegDataset, seed: int | None = None) -> DatasetSplit:
    d = cfg.data
    return sample_low_data_split(
        train.ids,
        train.mask_by_id,
        d.fraction_value(),
        d.split_seed if seed is None else seed,
        d.min_class_pixels,
        cfg.model.num_classes,
    )


EvalHook = Callable[[int, LossReport, dict], None]


def run_training(cfg: ExperimentConfig, on_eval: EvalHook | None = None, on_step=None) -> tuple[Trainer, dict]:
    cfg.validate()
    data = load_data(cfg)
    trainer = Trainer(cfg)
    result = trainer.fit(data.labeled, data.unlabeled, data.val, on_eval=on_eval, on_step=on_step)
    return trainer, result


def run_selftrain(cfg: ExperimentConfig, teacher: Trainer | None = None, pseudoseg: dict | None = None) -> dict:
    """Teacher (supervised only), student (offline hard pseudo labels) and
    PseudoSeg on the same split. Returns ``{row: eval result}``."""
    cfg.validate()
    data = load_data(cfg)
    if teacher is None:
        teacher, teacher_res = run_training(cfg.replace(**{"train.mode": "supervised_only"}))
    else:
        teacher_res = evaluate(teacher, data.val, variants=False)
    masks, ignored = generate_offline_pseudo_labels(teacher, data.unlabeled, cfg.fusion.hard_threshold)
    pseudo = PseudoLabeledDataset(data.unlabeled, masks)
    _, student_res = train_student(cfg, data.labeled, pseudo, data.val)
    if pseudoseg is None:
        mode = cfg.train.mode if cfg.train.mode != "supervised_only" else "unlabeled"
        _, pseudoseg = run_training(cfg.replace(**{"train.mode": mode}))
    return {
        "teacher": teacher_res,
        "student": student_res,
        "pseudoseg": pseudoseg,
        "mean_ignore_fraction": sum(ignored.values()) / max(len(ignored), 1),
    }


# One entry per study: list of (arm name, dotted overrides).
STUDIES: dict[str, list[tuple[str, dict]]] = {
    "sources": [
        (f"{src}{'+image_labels' if lvl else ''}", {"fusion.source": key, "train.mode": "image_level" if lvl else "unlabeled"})
        for lvl in (False, True)
        for src, key in (("decoder_only", "decoder_only"), ("sgc_only", "sgc_only"), ("calibrated_fusion", "fusion"))
    ],
    "hypercolumn": [("hypercolumn", {"model.features": "hypercolumn"}), ("last_layer", {"model.features": "last"})],
    "soft_hard": [("soft", {"fusion.mode": "soft"}), ("hard", {"fusion.mode": "hard"})],
    "sharpening": [("T=0.5", {"fusion.temperature": 0.5}), ("T=1", {"fusion.temperature": 1.0})],
    "jitter_strength": [(f"s={s}", {"augment.jitter_strength": s}) for s in (0.05, 0.25, 0.5, 1.0)],
    "backbone": [
        (f"{bb}/{mode}", {"model.backbone": bb, "train.mode": mode})
        for bb in ("desk", "desk_wide")
        for mode in ("supervised_only", "unlabeled")
    ],
}


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict:
    fa, fb = _flatten(a.to_dict()), _flatten(b.to_dict())
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def study_arms(cfg: ExperimentConfig, study: str) -> list[tuple[str, ExperimentConfig]]:
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    arms = []
    for name, overrides in STUDIES[study]:
        arm = cfg.replace(**overrides)
        stray = set(config_diff(cfg, arm)) - set(overrides)
        if stray:
            raise AssertionError(f"arm {name!r} changes unswept fields {sorted(stray)}")
        arms.append((name, arm))
    return arms


def run_ablation(cfg: ExperimentConfig, study: str, seeds=(1, 2, 3)) -> list[dict]:
    """Sweep one factor; every arm uses the same seeds (split and init)."""
    rows = []
    for name, arm in study_arms(cfg, study):
        for seed in seeds:
            run_cfg = arm.replace(**{"train.seed": seed, "data.split_seed": seed})
            _, res = run_training(run_cfg)
            row = {"study": study, "arm": name, "seed": seed, "miou": res["miou"]}
            if study == "sources" and "ece" in res:
                row["ece_full"] = res["ece"]["full"]
                row["ece_decoder_only"] = res["ece"]["decoder_only"]
            rows.append(row)
            log.info("%s %s seed=%d miou=%.4f", study, name, seed, res["miou"])
    return rows


def write_table(rows: list[dict], out_dir: str | Path, stem: str) -> None:
    import csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(rows, indent=1))
    if rows:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
