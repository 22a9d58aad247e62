"""Desk-scale comparisons over seeds 1-3: supervised vs PseudoSeg, the
pseudo-label source ablation, calibration of the fused labels, and the
self-training table. Writes ``desk_results.{json,csv}`` to ``--out``.
"""
import argparse
import logging
import time

import numpy as np

from pseudoseg.config import load_config
from pseudoseg.experiments import run_selftrain, run_training, write_table


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config).validate()
    rows = []
    for seed in args.seeds:
        cfg = base.replace(**{"train.seed": seed, "data.split_seed": seed})
        t0 = time.time()
        teacher, sup = run_training(cfg.replace(**{"train.mode": "supervised_only"}))
        _, fus = run_training(cfg)
        _, dec = run_training(cfg.replace(**{"fusion.source": "decoder_only"}))
        _, sgc = run_training(cfg.replace(**{"fusion.source": "sgc_only"}))
        st = run_selftrain(cfg, teacher=teacher, pseudoseg=fus)
        rows.append({
            "seed": seed,
            "supervised": sup["miou"],
            "pseudoseg": fus["miou"],
            "decoder_only": dec["miou"],
            "sgc_only": sgc["miou"],
            "student": st["student"]["miou"],
            "ece_full": fus["ece"]["full"],
            "ece_decoder_only": fus["ece"]["decoder_only"],
            "seconds": round(time.time() - t0),
        })
        logging.info("%s", rows[-1])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    rows.append({"seed": "mean", **mean})
    write_table(rows, args.out, "desk_results")
    for r in rows:
        print(r)


if __name__ == "__main__":
    main()
