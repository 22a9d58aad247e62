"""``pseudoseg`` command-line entry point.

Set ``PSEUDOSEG_DETERMINISTIC=1`` to force deterministic kernels and a
single intra-op thread; runs with the same config and seed then produce
byte-identical outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import DataError, IngestionError, SplitError
from .experiments import load_data, make_split, run_ablation, run_selftrain, write_table
from .training import CheckpointError, NumericalAbort, Trainer, evaluate

log = logging.getLogger("pseudoseg")

DETERMINISTIC_ENV = "PSEUDOSEG_DETERMINISTIC"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN = 0, 2, 3, 4


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0").lower() in ("1", "true", "yes")


def _setup_determinism() -> None:
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(value)
    if getattr(args, "seed", None) is not None:
        # one seed drives both the labeled split and the initialisation
        overrides["train.seed"] = args.seed
        overrides["data.split_seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["train.mode"] = args.mode
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


# --- commands ----------------------------------------------------------------


def cmd_make_splits(cfg: ExperimentConfig, seeds=(1, 2, 3)) -> list[Path]:
    data = load_data(cfg)
    if cfg.data.fraction_value() == 1:
        seeds = seeds[:1]
    out = _out_dir(cfg)
    paths = []
    for seed in seeds:
        split = make_split(cfg, data.train, seed)
        path = out / f"split_seed{seed}.json"
        path.write_text(split.to_json() + "\n")
        paths.append(path)
    return paths


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    data = load_data(cfg)
    trainer = Trainer(cfg)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    best = {"miou": -1.0}

    def on_eval(it, report, result):
        record = {"iteration": it, **report.as_dict(), **result}
        record.pop("valid_pixel_counts", None)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(_json_safe(record), sort_keys=True) + "\n")
        if result["miou"] > best["miou"]:
            best["miou"] = result["miou"]
            trainer.save(out / "best.ckpt")
        log.info("iter %d miou %.4f", it, result["miou"])

    def on_step(it, report):
        every = cfg.train.checkpoint_every
        if every and it % every == 0:
            trainer.save(out / f"iter_{it:06d}.ckpt")

    result = trainer.fit(data.labeled, data.unlabeled, data.val, on_eval=on_eval, on_step=on_step)
    trainer.save(out / "final.ckpt")
    return result


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> dict:
    if not Path(checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    trainer = Trainer.load(checkpoint)
    # the checkpoint's own data block decides what "val" means
    data = load_data(trainer.cfg)
    report = _json_safe(evaluate(trainer, data.val, variants=True))
    report["checkpoint"] = str(checkpoint)
    out = _out_dir(cfg)
    (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def cmd_ablate(cfg: ExperimentConfig, study: str, seeds=(1, 2, 3)) -> list[dict]:
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    rows = run_ablation(cfg, study, seeds)
    write_table(_json_safe(rows), out, study)
    return rows


def cmd_selftrain(cfg: ExperimentConfig, seeds=(1, 2, 3)) -> list[dict]:
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    rows = []
    for seed in seeds:
        res = run_selftrain(cfg.replace(**{"train.seed": seed, "data.split_seed": seed}))
        for name in ("teacher", "student", "pseudoseg"):
            rows.append({"row": name, "seed": seed, "miou": res[name]["miou"]})
        log.info("seed %d ignored fraction %.3f", seed, res["mean_ignore_fraction"])
    for name in ("teacher", "student", "pseudoseg"):
        vals = [r["miou"] for r in rows if r["row"] == name and r["seed"] != "mean"]
        rows.append({"row": name, "seed": "mean", "miou": float(np.mean(vals))})
    write_table(rows, out, "selftrain")
    return rows


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, mode=False):
        p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        if seed:
            p.add_argument("--seed", type=int, help="seed for the split and the initialisation")
        if mode:
            p.add_argument("--mode", choices=("unlabeled", "image_level", "supervised_only"))
        return p

    common(sub.add_parser("make-splits", help="write class-covering low-data splits"))
    common(sub.add_parser("train", help="train one model"), mode=True)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the val set"), seed=False)
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("ablate", help="sweep one factor over paired seeds"), mode=True)
    p.add_argument("--study", required=True)
    common(sub.add_parser("selftrain", help="teacher / student / PseudoSeg table"), mode=True)
    return parser


def _seeds(args) -> tuple[int, ...]:
    return (args.seed,) if getattr(args, "seed", None) is not None else (1, 2, 3)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _setup_determinism()
    try:
        if args.command in ("ablate", "selftrain"):
            # seeds are applied per arm, not to the base config
            seed, args.seed = args.seed, None
            cfg = resolve_config(args)
            args.seed = seed
        else:
            cfg = resolve_config(args)
        if args.command == "make-splits":
            for path in cmd_make_splits(cfg, _seeds(args)):
                print(path)
        elif args.command == "train":
            print(json.dumps(_json_safe(cmd_train(cfg)), sort_keys=True))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.checkpoint), sort_keys=True))
        elif args.command == "ablate":
            cmd_ablate(cfg, args.study, _seeds(args))
        elif args.command == "selftrain":
            cmd_selftrain(cfg, _seeds(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IngestionError, SplitError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
