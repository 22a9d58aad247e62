import json
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from pseudoseg.config import IGNORE_INDEX, ConfigError
from pseudoseg.data import (
    DataError,
    IngestionError,
    ShapesDataset,
    SplitError,
    class_pixel_counts,
    generate_shapes_sample,
    image_level_labels,
    load_voc_directory,
    materialize_shapes,
    sample_low_data_split,
)


def test_generator_is_deterministic():
    a = generate_shapes_sample(np.random.default_rng(7), (128, 128), 4)
    b = generate_shapes_sample(np.random.default_rng(7), (128, 128), 4)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_generator_output_contract():
    image, mask, labels = generate_shapes_sample(np.random.default_rng(3), (96, 80), 4)
    assert image.shape == (96, 80, 3) and mask.shape == (96, 80)
    assert np.isfinite(image).all() and image.min() >= 0 and image.max() <= 1
    assert set(np.unique(mask)) <= {0, 1, 2, 3}
    assert labels.shape == (3,)


@pytest.mark.parametrize("canvas,c", [((32, 64), 4), ((64, 64), 5), ((64, 64), 1)])
def test_generator_rejects_bad_config(canvas, c):
    with pytest.raises(ConfigError):
        generate_shapes_sample(np.random.default_rng(0), canvas, c)


@pytest.mark.parametrize("c", [2, 3, 4])
def test_generator_uses_only_allowed_classes(c):
    for seed in range(20):
        _, mask, labels = generate_shapes_sample(np.random.default_rng(seed), (64, 64), c)
        assert mask.max() < c
        assert labels.shape == (c - 1,)


def test_larger_shape_size_gives_more_foreground():
    def fg(size):
        masks = [generate_shapes_sample(np.random.default_rng(s), (64, 64), 4, shape_size=size)[1] for s in range(40)]
        return np.mean([(m > 0).mean() for m in masks])

    assert fg((0.2, 0.38)) > fg((0.09, 0.2))


def test_illumination_changes_pixels_not_masks():
    plain = generate_shapes_sample(np.random.default_rng(5), (64, 64), 4)
    lit = generate_shapes_sample(np.random.default_rng(5), (64, 64), 4, illumination=1.0)
    assert np.array_equal(plain[1], lit[1])
    assert not np.array_equal(plain[0], lit[0])
    assert lit[0].min() >= 0 and lit[0].max() <= 1


def test_zero_hue_noise_pins_shape_hue():
    from pseudoseg.augment import rgb_to_hsv

    image, mask, _ = generate_shapes_sample(np.random.default_rng(2), (64, 64), 4, hue_noise=0.0)
    hsv = rgb_to_hsv(image.astype(np.float64))
    for c in np.unique(mask[mask > 0]):
        hue = np.median(hsv[..., 0][mask == c])
        dist = min(abs(hue - (c - 1) / 3), 1 - abs(hue - (c - 1) / 3))
        assert dist < 0.05


@pytest.mark.parametrize(
    "field,value",
    [("hue_noise", -0.1), ("shape_size", (0.3, 0.2)), ("shape_size", (0.0, 0.2)), ("shape_size", (0.2, 0.6)), ("illumination", -1.0)],
)
def test_data_config_rejects_bad_generator_knobs(field, value):
    from pseudoseg.config import DataConfig

    with pytest.raises(ConfigError):
        DataConfig(**{field: value}).validate()


@pytest.mark.parametrize("seed", range(25))
def test_image_level_labels_match_pixel_scan(seed):
    _, mask, labels = generate_shapes_sample(np.random.default_rng(seed), (64, 64), 4)
    for c in range(1, 4):
        brute = any(mask[i, j] == c for i in range(64) for j in range(64))
        assert labels[c - 1] == brute


def test_image_level_labels_skip_ignored_pixels():
    mask = np.full((4, 4), IGNORE_INDEX, dtype=np.uint8)
    mask[0, 0] = 2
    assert image_level_labels(mask, 4).tolist() == [False, True, False]


def test_every_class_frequent_over_1000_samples():
    counts = np.zeros(3, dtype=int)
    for i in range(1000):
        _, _, labels = generate_shapes_sample(np.random.default_rng([0, i]), (64, 64), 4)
        counts += labels
    # frozen regression bound; the generator gives each class to roughly 40% of images
    assert (counts >= 200).all(), counts


def test_materialize_round_trip(tmp_path):
    train = ShapesDataset(3, seed=5, canvas=(64, 64))
    val = ShapesDataset(2, seed=6, canvas=(64, 64), prefix="val")
    materialize_shapes(tmp_path, train, val)
    loaded = load_voc_directory(tmp_path, "train", num_classes=4)
    assert len(loaded) == 3
    for (x0, y0), (x1, y1) in zip(train, loaded):
        assert np.array_equal(x0, x1)
        assert np.array_equal(y0, y1)
    labels = json.loads((tmp_path / "labels.json").read_text())
    assert labels[train.ids[0]] == image_level_labels(train[0][1], 4).astype(int).tolist()
    assert len(load_voc_directory(tmp_path, "val", num_classes=4)) == 2


def _write_pair(root, stem, mask):
    for sub in ("images", "masks", "splits"):
        (root / sub).mkdir(exist_ok=True)
    Image.fromarray(np.zeros(mask.shape + (3,), np.uint8)).save(root / "images" / f"{stem}.jpg")
    Image.fromarray(mask, mode="L").save(root / "masks" / f"{stem}.png")


def test_voc_keeps_255_as_ignore(tmp_path):
    mask = np.zeros((16, 16), np.uint8)
    mask[:4] = 255
    mask[8:, 8:] = 3
    _write_pair(tmp_path, "a", mask)
    _write_pair(tmp_path, "b", np.zeros((16, 16), np.uint8))
    (tmp_path / "splits" / "train.txt").write_text("a\nb\n")
    ds = load_voc_directory(tmp_path, "train", num_classes=4)
    assert len(ds) == 2
    _, y = ds[0]
    assert (y[:4] == IGNORE_INDEX).all()
    assert class_pixel_counts(y, 4).tolist() == [16 * 16 - 64 - 64, 0, 0, 64]


def test_voc_missing_mask_names_the_id(tmp_path):
    _write_pair(tmp_path, "good", np.zeros((16, 16), np.uint8))
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
    (tmp_path / "splits" / "train.txt").write_text("good\norphan\n")
    with pytest.raises(IngestionError, match="orphan"):
        load_voc_directory(tmp_path, "train", num_classes=4)


def test_voc_rejects_out_of_range_class(tmp_path):
    _write_pair(tmp_path, "bad", np.full((16, 16), 7, np.uint8))
    (tmp_path / "splits" / "train.txt").write_text("bad\n")
    ds = load_voc_directory(tmp_path, "train", num_classes=4)
    with pytest.raises(DataError):
        ds[0]


# --- split sampling ---------------------------------------------------------

def _toy_masks(n=10, rare_index=6):
    masks = {}
    for i in range(n):
        m = np.zeros((16, 16), np.uint8)
        m[:8, :8] = 1
        m[8:, 8:] = 2
        if i == rare_index:
            m[:8, 8:] = 3
        masks[f"img{i}"] = m
    return masks


def test_full_fraction_takes_everything():
    masks = _toy_masks()
    split = sample_low_data_split(list(masks), masks.__getitem__, 1, seed=0, min_class_pixels=1, num_classes=4)
    assert sorted(split.labeled_ids) == sorted(masks) and split.unlabeled_ids == ()


@pytest.mark.parametrize("seed", range(1, 40))
def test_rare_class_image_always_labeled(seed):
    masks = _toy_masks()
    ids = list(masks)
    # exhaustive oracle: a 2-of-10 subset covers class 3 iff it contains img6
    covering = [s for s in combinations(ids, 2) if "img6" in s]
    assert len(covering) == 9
    try:
        split = sample_low_data_split(ids, masks.__getitem__, Fraction(1, 5), seed, min_class_pixels=1, num_classes=4)
    except SplitError as err:
        assert err.uncovered == [3]
    else:
        assert "img6" in split.labeled_ids


def test_infeasible_split_reports_uncovered_classes():
    masks = _toy_masks(rare_index=-1)
    with pytest.raises(SplitError) as err:
        sample_low_data_split(list(masks), masks.__getitem__, Fraction(1, 2), 0, min_class_pixels=1, num_classes=4, max_retries=5)
    assert err.value.uncovered == [3]


def test_three_seeds_give_distinct_covering_splits():
    ds = ShapesDataset(96, seed=0, canvas=(64, 64))
    splits = [sample_low_data_split(ds.ids, ds.mask_by_id, Fraction(1, 16), s, 64, 4) for s in (1, 2, 3)]
    assert len({sp.labeled_ids for sp in splits}) == 3
    for sp in splits:
        assert len(sp.labeled_ids) == 6
        total = sum(class_pixel_counts(ds.mask_by_id(i), 4) for i in sp.labeled_ids)
        assert (total >= 64).all()


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10_000))
def test_split_partitions_ids(num, den, seed):
    frac = Fraction(min(num, den), den)
    masks = {f"m{i}": np.full((4, 4), i % 2, np.uint8) for i in range(20)}
    split = sample_low_data_split(list(masks), masks.__getitem__, frac, seed, min_class_pixels=0, num_classes=2)
    assert len(split.labeled_ids) + len(split.unlabeled_ids) == 20
    assert not set(split.labeled_ids) & set(split.unlabeled_ids)
    assert len(split.labeled_ids) == -(-frac.numerator * 20 // frac.denominator)
