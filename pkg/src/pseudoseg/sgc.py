"""Self-attention Grad-CAM refinement and calibrated prediction fusion.

Functions here accept a ``dim`` argument for the class axis. Dense maps use
``dim=1`` (NCHW); plain class vectors can pass ``dim=-1``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EPS, IGNORE_INDEX, ConfigError, FusionConfig


def sgc_propagate(
    m: torch.Tensor,
    h: torch.Tensor,
    w_key: torch.Tensor,
    w_query: torch.Tensor,
    w_out: torch.Tensor,
) -> torch.Tensor:
    """Propagate scores between regions by learned feature similarity.

    For every region ``i``::

        out_i = (m_i + sum_j softmax_j(<W_k h_i, W_v h_j>) m_j) @ W_c

    ``m`` is ``(..., L, C)``, ``h`` is ``(..., L, D)``, ``w_key`` and
    ``w_query`` are ``(D, E)`` and ``w_out`` is ``(C, C)``.
    """
    if m.shape[:-1] != h.shape[:-1]:
        raise ValueError(f"score map {tuple(m.shape)} and features {tuple(h.shape)} are not aligned")
    if w_out.shape != (m.shape[-1], m.shape[-1]):
        raise ValueError(f"w_out must be {m.shape[-1]}x{m.shape[-1]}, got {tuple(w_out.shape)}")
    keys = h @ w_key
    queries = h @ w_query
    attn = torch.softmax(keys @ queries.transpose(-1, -2), dim=-1)
    return (m + attn @ m) @ w_out


class SGCHead(nn.Module):
    """Key/query 1x1 projections of the hypercolumn, score propagation, then a
    1x1 convolution with batch normalisation producing SGC logits."""

    def __init__(self, feature_dim: int, num_classes: int, embed_dim: int = 16):
        super().__init__()
        self.key = nn.Conv2d(feature_dim, embed_dim, 1, bias=False)
        self.query = nn.Conv2d(feature_dim, embed_dim, 1, bias=False)
        self.out = nn.Conv2d(num_classes, num_classes, 1, bias=False)
        self.bn = nn.BatchNorm2d(num_classes)
        nn.init.normal_(self.key.weight, std=feature_dim ** -0.5)
        nn.init.normal_(self.query.weight, std=feature_dim ** -0.5)
        with torch.no_grad():
            self.out.weight.copy_(torch.eye(num_classes)[:, :, None, None])

    def forward(self, value: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = value.shape
        m = value.flatten(2).transpose(1, 2)
        hc = features.flatten(2).transpose(1, 2)
        out = sgc_propagate(
            m,
            hc,
            self.key.weight[:, :, 0, 0].t(),
            self.query.weight[:, :, 0, 0].t(),
            self.out.weight[:, :, 0, 0].t(),
        )
        return self.bn(out.transpose(1, 2).reshape(b, c, hh, ww))


def norm_factor(p: torch.Tensor, m: torch.Tensor, dim: int = 1, eps: float = EPS) -> torch.Tensor:
    """Joint Euclidean magnitude of two logit vectors, floored at ``eps``."""
    return torch.sqrt((p * p).sum(dim, keepdim=True) + (m * m).sum(dim, keepdim=True)).clamp_min(eps)


def sharpen(p: torch.Tensor, temperature: float, dim: int = 1) -> torch.Tensor:
    """``p_i^(1/T) / sum_j p_j^(1/T)``, evaluated in log space."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if temperature == 1.0:
        return p / p.sum(dim, keepdim=True)
    return torch.softmax(torch.log(p) / temperature, dim=dim)


def fuse(p_logits: torch.Tensor, m_logits: torch.Tensor, cfg: FusionConfig, dim: int = 1) -> torch.Tensor:
    """Calibrated fusion of decoder and SGC logits into a soft pseudo label.

    Both logit maps are divided by their joint per-pixel magnitude, turned into
    probabilities, mixed with weight ``gamma`` on the decoder, and sharpened at
    temperature ``T``.
    """
    if p_logits.shape != m_logits.shape:
        raise ValueError(f"shape mismatch {tuple(p_logits.shape)} vs {tuple(m_logits.shape)}")
    n = norm_factor(p_logits, m_logits, dim)
    mix = cfg.gamma * torch.softmax(p_logits / n, dim) + (1 - cfg.gamma) * torch.softmax(m_logits / n, dim)
    return sharpen(mix, cfg.temperature, dim)


def harden(probs: torch.Tensor, threshold: float = 0.5, dim: int = 1) -> torch.Tensor:
    """Argmax class where the top probability exceeds ``threshold``, else ignore."""
    conf, label = probs.max(dim)
    return torch.where(conf > threshold, label, torch.full_like(label, IGNORE_INDEX))


FUSION_VARIANTS = (
    "decoder_only",
    "sgc_only",
    "mix_no_norm",
    "mix_no_sharpen",
    "full_no_norm_no_sharpen",
    "hard_decoder",
    "full",
)


def fusion_variant(
    p_logits: torch.Tensor,
    m_logits: torch.Tensor,
    variant: str,
    cfg: FusionConfig | None = None,
    dim: int = 1,
) -> torch.Tensor:
    """Alternative pseudo-label constructions used in the calibration study.

    ========================  =================================================
    decoder_only              softmax(p)
    sgc_only                  softmax(m)
    full_no_norm_no_sharpen   g softmax(p) + (1-g) softmax(m)
    mix_no_norm               sharpen(g softmax(p) + (1-g) softmax(m), T)
    mix_no_sharpen            g softmax(p/N) + (1-g) softmax(m/N)
    hard_decoder              one-hot argmax of softmax(p)
    full                      sharpen(g softmax(p/N) + (1-g) softmax(m/N), T)
    ========================  =================================================
    """
    cfg = cfg or FusionConfig()
    g, t = cfg.gamma, cfg.temperature
    if variant == "decoder_only":
        return torch.softmax(p_logits, dim)
    if variant == "sgc_only":
        return torch.softmax(m_logits, dim)
    if variant == "full_no_norm_no_sharpen":
        return g * torch.softmax(p_logits, dim) + (1 - g) * torch.softmax(m_logits, dim)
    if variant == "mix_no_norm":
        return sharpen(g * torch.softmax(p_logits, dim) + (1 - g) * torch.softmax(m_logits, dim), t, dim)
    if variant == "mix_no_sharpen":
        n = norm_factor(p_logits, m_logits, dim)
        return g * torch.softmax(p_logits / n, dim) + (1 - g) * torch.softmax(m_logits / n, dim)
    if variant == "hard_decoder":
        idx = p_logits.argmax(dim, keepdim=True)
        return torch.zeros_like(p_logits).scatter_(dim, idx, 1.0)
    if variant == "full":
        return fuse(p_logits, m_logits, cfg, dim)
    raise ConfigError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")


def pseudo_label(p_logits: torch.Tensor, m_logits: torch.Tensor, cfg: FusionConfig) -> torch.Tensor:
    """Training-time pseudo label for the configured source, as probabilities."""
    if cfg.source == "fusion":
        probs = fuse(p_logits, m_logits, cfg)
    elif cfg.source == "decoder_only":
        probs = sharpen(torch.softmax(p_logits, 1), cfg.temperature)
    elif cfg.source == "sgc_only":
        probs = sharpen(torch.softmax(m_logits, 1), cfg.temperature)
    else:
        raise ConfigError(f"unknown pseudo-label source {cfg.source!r}")
    if cfg.mode == "hard":
        hard = harden(probs, cfg.hard_threshold)
        onehot = F.one_hot(hard.clamp_max(probs.shape[1] - 1), probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
        # ignored pixels get an all-zero target, which contributes no loss
        probs = onehot * (hard != IGNORE_INDEX)[:, None].to(probs.dtype)
    return probs


# --- binary container for score maps and pseudo labels --------------------

_MAGIC = b"PSMAP1\0\0"


def save_score_map(path: str | Path, array) -> None:
    """Write ``array`` as: magic, uint32 ndim, uint32 dims, float32 data (little endian)."""
    a = np.asarray(array.detach().cpu() if isinstance(array, torch.Tensor) else array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def load_score_map(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a score-map file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(shape).copy()
