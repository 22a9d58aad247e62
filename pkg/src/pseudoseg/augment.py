"""Weak (geometric) and strong (photometric + CutOut) augmentation.

The strong view is always built on top of the weak view and never moves a
pixel, so pixel ``(i, j)`` of both views shows the same scene point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import IGNORE_INDEX, AugmentConfig


@dataclass(frozen=True)
class GeometryRecord:
    flip: bool
    scale: float
    scaled_size: tuple[int, int]
    offset: tuple[int, int]
    crop_size: tuple[int, int]


def resize_image(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(x.shape[:2]) == tuple(size):
        return x
    t = torch.from_numpy(np.array(x, copy=True)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().astype(x.dtype)


def resize_mask(y: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = y.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return y[rows][:, cols]


def _pad_to(a: np.ndarray, size: tuple[int, int], fill) -> np.ndarray:
    h, w = a.shape[:2]
    ph, pw = max(size[0] - h, 0), max(size[1] - w, 0)
    if ph == 0 and pw == 0:
        return a
    out = np.empty((h + ph, w + pw) + a.shape[2:], dtype=a.dtype)
    out[...] = np.asarray(fill, dtype=a.dtype)
    out[:h, :w] = a
    return out


def apply_geometry(a: np.ndarray, rec: GeometryRecord, fill, is_mask: bool = False) -> np.ndarray:
    """Replay a recorded weak-augmentation geometry on an image or a mask."""
    if rec.flip:
        a = a[:, ::-1]
    a = resize_mask(a, rec.scaled_size) if is_mask else resize_image(np.ascontiguousarray(a), rec.scaled_size)
    a = _pad_to(a, rec.crop_size, fill)
    oy, ox = rec.offset
    return np.ascontiguousarray(a[oy:oy + rec.crop_size[0], ox:ox + rec.crop_size[1]])


def sample_geometry(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> GeometryRecord:
    h, w = shape
    flip = bool(rng.random() < cfg.hflip_prob)
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ch, cw = cfg.crop_size
    oy = int(rng.integers(0, max(sh, ch) - ch + 1))
    ox = int(rng.integers(0, max(sw, cw) - cw + 1))
    return GeometryRecord(flip, scale, (sh, sw), (oy, ox), (ch, cw))


def weak_augment(x: np.ndarray, y: np.ndarray | None, cfg: AugmentConfig, rng: np.random.Generator):
    """Random flip, random rescale, then random crop (padding when needed).

    The mask follows the same geometry with nearest-neighbour resampling and
    ``IGNORE_INDEX`` padding. Returns ``(image, mask_or_None, record)``.
    """
    rec = sample_geometry(x.shape[:2], cfg, rng)
    xw = apply_geometry(x, rec, cfg.mean_color)
    yw = None if y is None else apply_geometry(y, rec, IGNORE_INDEX, is_mask=True)
    return xw, yw, rec


# --- photometric ops -------------------------------------------------------

def _gray(x: np.ndarray) -> np.ndarray:
    return (x @ np.array([0.299, 0.587, 0.114], dtype=x.dtype))[..., None]


def rgb_to_hsv(x: np.ndarray) -> np.ndarray:
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    maxc, minc = x.max(-1), x.min(-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    d = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / d, (maxc - g) / d, (maxc - b) / d
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], -1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], -1)


def color_jitter(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """SimCLR-style jitter: brightness, contrast, saturation and hue in random order.

    Factors are drawn from ``[max(0, 1 - 0.8 s), 1 + 0.8 s]`` and the hue
    shift from ``[-0.2 s, 0.2 s]``. Neutral factors are skipped so ``s = 0``
    returns the input unchanged.
    """
    lo, hi = max(0.0, 1.0 - 0.8 * strength), 1.0 + 0.8 * strength
    factors = rng.uniform(lo, hi, size=3)
    hue = rng.uniform(-0.2 * strength, 0.2 * strength)
    order = rng.permutation(4)
    out = x
    for op in order:
        if op == 0 and factors[0] != 1.0:
            out = out * factors[0]
        elif op == 1 and factors[1] != 1.0:
            m = _gray(out).mean()
            out = (out - m) * factors[1] + m
        elif op == 2 and factors[2] != 1.0:
            g = _gray(out)
            out = g + (out - g) * factors[2]
        elif op == 3 and hue != 0.0:
            hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
            hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
            out = hsv_to_rgb(hsv)
        if out is not x:
            out = np.clip(out, 0.0, 1.0)
    return out.astype(x.dtype, copy=False)


def cutout_box(shape: tuple[int, int], size: int, center: tuple[int, int]) -> tuple[int, int, int, int]:
    cy, cx = center
    y0, x0 = cy - size // 2, cx - size // 2
    return max(y0, 0), min(y0 + size, shape[0]), max(x0, 0), min(x0 + size, shape[1])


def cutout(x: np.ndarray, size: int, rng: np.random.Generator, fill=(0.5, 0.5, 0.5)):
    """Erase one ``size`` x ``size`` square centred anywhere in the image.

    The square is clipped at the borders. Returns ``(image, erased_mask)``.
    ``size == 0`` disables the operation.
    """
    h, w = x.shape[:2]
    erased = np.zeros((h, w), dtype=bool)
    if size <= 0:
        return x, erased
    center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    y0, y1, x0, x1 = cutout_box((h, w), size, center)
    out = x.copy()
    out[y0:y1, x0:x1] = np.asarray(fill, dtype=x.dtype)
    erased[y0:y1, x0:x1] = True
    return out, erased


def strong_augment(x_weak: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Color jitter followed by CutOut; no geometric change."""
    jittered = color_jitter(x_weak, cfg.jitter_strength, rng)
    return cutout(jittered, cfg.cutout_size, rng, cfg.mean_color)
