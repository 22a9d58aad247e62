"""Write the synthetic shapes dataset to disk in the VOC-style directory layout.

The result can be used with ``data.source: voc_dir`` to exercise the on-disk
ingestion path.
"""
import argparse

from pseudoseg.config import load_config
from pseudoseg.data import ShapesDataset, materialize_shapes


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root")
    parser.add_argument("--config", help="take the data block from this config")
    args = parser.parse_args()

    cfg = load_config(args.config).validate()
    d, c = cfg.data, cfg.model.num_classes
    extra = dict(hue_noise=d.hue_noise, shape_size=d.shape_size, illumination=d.illumination)
    train = ShapesDataset(d.num_train, d.data_seed, d.canvas, c, **extra)
    val = ShapesDataset(d.num_val, d.data_seed + 10_000, d.canvas, c, prefix="val", **extra)
    print(materialize_shapes(args.root, train, val))


if __name__ == "__main__":
    main()
