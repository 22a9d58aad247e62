"""Images, masks, the synthetic shapes dataset, VOC-style ingestion and
class-aware low-data split sampling.

Images are float32 ``(H, W, 3)`` arrays in ``[0, 1]``; masks are uint8
``(H, W)`` class-index arrays where ``IGNORE_INDEX`` marks unannotated pixels.
Class 0 is always background.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image

from .augment import color_jitter
from .config import IGNORE_INDEX, ConfigError, parse_fraction

SHAPE_NAMES = ("background", "circle", "square", "triangle")


class IngestionError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class SplitError(RuntimeError):
    def __init__(self, message: str, uncovered: Sequence[int] = ()):
        super().__init__(message)
        self.uncovered = list(uncovered)


def image_level_labels(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Boolean presence vector over the foreground classes ``1..C-1``."""
    valid = mask[mask != IGNORE_INDEX].astype(np.int64)
    counts = np.bincount(valid, minlength=num_classes)[:num_classes]
    return counts[1:] > 0


# ---------------------------------------------------------------------------
# synthetic shapes


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int = 3) -> np.ndarray:
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0, x0 = ys.astype(int), xs.astype(int)
        ty, tx = ys - y0, xs - x0
        # smoothstep fade, as in Perlin noise
        ty, tx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
        a = grid[y0][:, x0]
        b = grid[y0][:, x0 + 1]
        c = grid[y0 + 1][:, x0]
        d = grid[y0 + 1][:, x0 + 1]
        top = a + (b - a) * tx[None, :]
        bot = c + (d - c) * tx[None, :]
        out += amp * (top + (bot - top) * ty[:, None])
        total += amp
        amp *= 0.5
    return out / total


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: int, cy: float, cx: float, r: float, angle: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    if kind == 1:
        return dy * dy + dx * dx <= r * r
    cos, sin = math.cos(angle), math.sin(angle)
    u, v = cos * dx + sin * dy, -sin * dx + cos * dy
    if kind == 2:
        half = r / math.sqrt(2.0)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle inscribed in the radius-r circle: three half-planes
    inside = np.ones((h, w), dtype=bool)
    for k in range(3):
        theta = 2 * math.pi * k / 3
        inside &= u * math.cos(theta) + v * math.sin(theta) <= r / 2
    return inside


def generate_shapes_sample(
    rng: np.random.Generator,
    canvas: tuple[int, int] = (64, 64),
    num_classes: int = 4,
    hue_noise: float = 0.12,
    shape_size: tuple[float, float] = (0.09, 0.2),
    illumination: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one synthetic image with 1-4 non-overlapping shapes.

    Circles, squares and triangles are classes 1..3 (only the first
    ``num_classes - 1`` kinds are used). Each kind has a preferred hue but
    the hue is noisy and the background is coloured value noise, so colour
    alone does not separate the classes. ``hue_noise`` is the std of the hue
    around the preferred value; large values make colour a pure nuisance.
    ``shape_size`` bounds the shape radius as a fraction of the short side.
    ``illumination > 0`` applies a random per-image photometric change
    (brightness, contrast, saturation, hue) of that strength.

    Returns ``(image, mask, image_level_labels)``; the image is quantised to
    8-bit levels so that a PNG round trip is lossless.
    """
    h, w = canvas
    if num_classes not in (2, 3, 4):
        raise ConfigError(f"num_classes must be 2, 3 or 4, got {num_classes}")
    if h < 64 or w < 64:
        raise ConfigError(f"canvas must be at least 64x64, got {canvas}")

    base = _hsv_to_rgb(rng.random(), rng.uniform(0.1, 0.6), rng.uniform(0.3, 0.9))
    alt = _hsv_to_rgb(rng.random(), rng.uniform(0.1, 0.6), rng.uniform(0.3, 0.9))
    t = _value_noise(rng, h, w)[..., None]
    image = base * (1 - t) + alt * t
    mask = np.zeros((h, w), dtype=np.uint8)

    n_shapes = int(rng.integers(1, 5))
    placed: list[tuple[float, float, float]] = []
    lo, hi = shape_size[0] * min(h, w), shape_size[1] * min(h, w)
    for _ in range(n_shapes):
        for _attempt in range(50):
            r = rng.uniform(lo, hi)
            cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
            if all(math.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr in placed):
                break
        else:
            continue
        kind = int(rng.integers(1, num_classes))
        angle = rng.uniform(0, 2 * math.pi)
        region = _shape_mask(kind, cy, cx, r, angle, h, w)
        if not region.any():
            continue
        hue = ((kind - 1) / 3.0 + rng.normal(0.0, hue_noise)) % 1.0
        color = _hsv_to_rgb(hue, rng.uniform(0.35, 1.0), rng.uniform(0.45, 1.0))
        shade = 0.85 + 0.15 * _value_noise(rng, h, w, octaves=2)[..., None]
        image = np.where(region[..., None], color * shade, image)
        mask[region] = kind
        placed.append((cy, cx, r))

    if illumination > 0:
        image = color_jitter(np.clip(image, 0.0, 1.0), illumination, rng)
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    image = image.astype(np.float32) / np.float32(255.0)
    return image, mask, image_level_labels(mask, num_classes)


class SegDataset:
    """Read-only indexable collection of ``(image, mask)`` pairs with ids."""

    num_classes: int
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self[i]

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def mask_by_id(self, sample_id: str) -> np.ndarray:
        return self[self._index[sample_id]][1]

    def labels(self, index: int) -> np.ndarray:
        return image_level_labels(self[index][1], self.num_classes)


class ShapesDataset(SegDataset):
    """Eagerly generated shapes dataset; sample ``i`` depends only on ``(seed, i)``."""

    def __init__(self, num_samples: int, seed: int = 0, canvas=(64, 64), num_classes: int = 4, prefix: str = "shapes",
                 hue_noise: float = 0.12, shape_size: tuple[float, float] = (0.09, 0.2),
                 illumination: float = 0.0):
        self.num_classes = num_classes
        self.canvas = tuple(canvas)
        self.seed = seed
        self.ids = [f"{prefix}_{i:05d}" for i in range(num_samples)]
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        images, masks = [], []
        for i in range(num_samples):
            img, msk, _ = generate_shapes_sample(np.random.default_rng([seed, i]), self.canvas, num_classes, hue_noise, tuple(shape_size), illumination)
            img.setflags(write=False)
            msk.setflags(write=False)
            images.append(img)
            masks.append(msk)
        self._images, self._masks = images, masks

    def __getitem__(self, index: int):
        return self._images[index], self._masks[index]


class Subset(SegDataset):
    def __init__(self, parent: SegDataset, ids: Sequence[str]):
        self.parent = parent
        self.num_classes = parent.num_classes
        self.ids = list(ids)
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        self._parent_idx = [parent.index_of(s) for s in self.ids]

    def __getitem__(self, index: int):
        return self.parent[self._parent_idx[index]]


# ---------------------------------------------------------------------------
# VOC-style directories


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path.name}: mask must be a single-channel index image, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


class VOCDirectory(SegDataset):
    """Lazy reader for ``root/{images,masks,splits}``.

    Every id in the split file must have an image and a mask; this is checked
    up front so a missing mask fails at construction, not mid-training.
    """

    IMAGE_EXTS = (".png", ".jpg", ".jpeg")

    def __init__(self, root: str | Path, split: str = "train", num_classes: int = 21):
        self.root = Path(root)
        self.num_classes = num_classes
        split_file = self.root / "splits" / f"{split}.txt"
        if not split_file.exists():
            raise IngestionError(f"split list not found: {split_file}")
        self.ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        self._image_paths = []
        for sid in self.ids:
            img = next((self.root / "images" / f"{sid}{ext}" for ext in self.IMAGE_EXTS
                        if (self.root / "images" / f"{sid}{ext}").exists()), None)
            if img is None:
                raise IngestionError(f"no image found for id {sid!r}")
            if not (self.root / "masks" / f"{sid}.png").exists():
                raise IngestionError(f"missing mask for image id {sid!r}")
            self._image_paths.append(img)

    def __getitem__(self, index: int):
        sid = self.ids[index]
        image = _read_image(self._image_paths[index])
        mask = _read_mask(self.root / "masks" / f"{sid}.png")
        bad = (mask >= self.num_classes) & (mask != IGNORE_INDEX)
        if bad.any():
            raise DataError(f"mask {sid!r} has class values {sorted(set(mask[bad].tolist()))} >= {self.num_classes}")
        if image.shape[:2] != mask.shape:
            raise DataError(f"image/mask size mismatch for {sid!r}: {image.shape[:2]} vs {mask.shape}")
        return image, mask


def load_voc_directory(root: str | Path, split: str = "train", num_classes: int = 21) -> VOCDirectory:
    return VOCDirectory(root, split, num_classes)


def materialize_shapes(
    root: str | Path,
    train: SegDataset,
    val: SegDataset | None = None,
) -> Path:
    """Write datasets in the VOC-style layout plus ``labels.json``."""
    root = Path(root)
    for sub in ("images", "masks", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    labels = {}
    for split, ds in (("train", train), ("val", val)):
        if ds is None:
            continue
        for i, sid in enumerate(ds.ids):
            image, mask = ds[i]
            Image.fromarray(np.round(image * 255).astype(np.uint8)).save(root / "images" / f"{sid}.png")
            Image.fromarray(mask, mode="L").save(root / "masks" / f"{sid}.png")
            labels[sid] = image_level_labels(mask, ds.num_classes).astype(int).tolist()
        (root / "splits" / f"{split}.txt").write_text("".join(f"{s}\n" for s in ds.ids))
    (root / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))
    return root


# ---------------------------------------------------------------------------
# low-data split sampling


@dataclass(frozen=True)
class DatasetSplit:
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    seed: int
    fraction: Fraction

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "fraction": str(self.fraction),
                "labeled_ids": list(self.labeled_ids),
                "unlabeled_ids": list(self.unlabeled_ids),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        raw = json.loads(text)
        return cls(tuple(raw["labeled_ids"]), tuple(raw["unlabeled_ids"]), raw["seed"], Fraction(raw["fraction"]))


def class_pixel_counts(mask: np.ndarray, num_classes: int) -> np.ndarray:
    valid = mask[mask != IGNORE_INDEX].astype(np.int64)
    return np.bincount(valid, minlength=num_classes)[:num_classes]


def sample_low_data_split(
    ids: Sequence[str],
    masks: Callable[[str], np.ndarray],
    fraction,
    seed: int,
    min_class_pixels: int = 64,
    num_classes: int | None = None,
    max_retries: int = 100,
) -> DatasetSplit:
    """Randomly pick ``ceil(fraction * len(ids))`` labeled ids such that every
    class has at least ``min_class_pixels`` labeled pixels.

    Each retry draws from a fresh generator derived from ``(seed, attempt)``.
    """
    frac = parse_fraction(fraction)
    if not 0 < frac <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {frac}")
    ids = list(ids)
    counts = {sid: class_pixel_counts(masks(sid), num_classes or 256) for sid in ids}
    if num_classes is None:
        num_classes = 1 + max(int(np.flatnonzero(c).max(initial=0)) for c in counts.values())
        counts = {sid: c[:num_classes] for sid, c in counts.items()}
    k = math.ceil(frac * len(ids))

    uncovered: list[int] = list(range(num_classes))
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        chosen = sorted(rng.choice(len(ids), size=k, replace=False).tolist())
        total = sum(counts[ids[i]] for i in chosen)
        uncovered = [c for c in range(num_classes) if total[c] < min_class_pixels]
        if not uncovered:
            picked = set(chosen)
            return DatasetSplit(
                labeled_ids=tuple(ids[i] for i in chosen),
                unlabeled_ids=tuple(sid for i, sid in enumerate(ids) if i not in picked),
                seed=seed,
                fraction=frac,
            )
    raise SplitError(
        f"no class-covering split of {k} labeled ids after {max_retries} attempts; "
        f"uncovered classes in last attempt: {uncovered}",
        uncovered,
    )
