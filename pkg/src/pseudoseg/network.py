"""Segmentation network, hypercolumn features, Grad-CAM and value maps.

Tensors follow the torch NCHW convention: images ``(B, 3, H, W)``, logits
``(B, C, H, W)``, per-class score maps ``(B, K, h, w)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BACKBONE_PRESETS, EPS, ConfigError, ModelConfig


def _groups(ch: int) -> int:
    for g in (4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def conv_block(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.GroupNorm(_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class FeaturePack:
    stages: list[torch.Tensor]
    pooled: torch.Tensor
    decoder_logits: torch.Tensor

    @property
    def last(self) -> torch.Tensor:
        return self.stages[-1]


class SegNet(nn.Module):
    """Four-stage encoder (output stride 4), light decoder and a one-layer
    multi-label classifier on globally pooled last-stage features."""

    def __init__(self, num_classes: int, widths=(16, 32, 48, 48), decoder_width: int = 32):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.stage1 = nn.Sequential(conv_block(3, w1, stride=2), conv_block(w1, w1))
        self.stage2 = nn.Sequential(conv_block(w1, w2, stride=2), conv_block(w2, w2))
        self.stage3 = conv_block(w2, w3, dilation=2)
        self.stage4 = conv_block(w3, w4, dilation=2)
        self.low_proj = nn.Sequential(nn.Conv2d(w1, w1, 1, bias=False), nn.GroupNorm(_groups(w1), w1), nn.ReLU(inplace=True))
        self.fuse = conv_block(w4 + w1, decoder_width)
        self.head = nn.Conv2d(decoder_width, num_classes, 1)
        self.classifier = nn.Linear(w4, num_classes - 1)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "SegNet":
        preset = BACKBONE_PRESETS.get(cfg.backbone)
        if preset is None:
            raise ConfigError(f"backbone {cfg.backbone!r} is not buildable")
        widths, dec = preset
        return cls(cfg.num_classes, widths, dec)

    @property
    def hypercolumn_dim(self) -> int:
        return self.widths[2] + self.widths[3]

    def forward(self, x: torch.Tensor) -> FeaturePack:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        up = F.interpolate(s4, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        d = self.fuse(torch.cat([up, self.low_proj(s1)], 1))
        logits = F.interpolate(self.head(d), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return FeaturePack([s1, s2, s3, s4], s4.mean((2, 3)), logits)

    def classify(self, fp: FeaturePack) -> torch.Tensor:
        return self.classifier(fp.pooled)


def hypercolumn(fp: FeaturePack, mode: str = "hypercolumn") -> torch.Tensor:
    """Concatenate the last two stages at the last stage's resolution.

    ``mode="last"`` returns the last stage alone (ablation arm).
    """
    last = fp.stages[-1]
    if mode == "last":
        return last
    prev = fp.stages[-2]
    if prev.shape[-2:] != last.shape[-2:]:
        prev = F.interpolate(prev, size=last.shape[-2:], mode="bilinear", align_corners=False)
    return torch.cat([prev, last], 1)


def cam_from_gradients(features: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """ReLU of the feature maps weighted by their spatially averaged gradients.

    ``features`` and ``grads`` are ``(B, D, h, w)``; returns ``(B, h, w)``.
    """
    weights = grads.mean((2, 3), keepdim=True)
    return F.relu((weights * features).sum(1))


def grad_cam(fp: FeaturePack, model: SegNet, class_index: int) -> torch.Tensor:
    """Grad-CAM for foreground class ``class_index`` (1..C-1) on the last stage.

    Computed per image on a detached copy of the features, so the returned
    map carries no graph back into the encoder.
    """
    return grad_cams(fp, model, [class_index])[:, 0]


def grad_cams(fp: FeaturePack, model: SegNet, classes=None) -> torch.Tensor:
    n_fg = model.num_classes - 1
    classes = list(range(1, n_fg + 1)) if classes is None else list(classes)
    for c in classes:
        if not 1 <= c <= n_fg:
            raise ValueError(f"class_index must lie in 1..{n_fg}, got {c}")
    with torch.enable_grad():
        feat = fp.last.detach().requires_grad_(True)
        logits = model.classifier(feat.mean((2, 3)))
        cams = []
        for c in classes:
            # the logit of image b depends only on image b, so summing over
            # the batch gives each image its own gradient
            (g,) = torch.autograd.grad(logits[:, c - 1].sum(), feat, retain_graph=True)
            cams.append(cam_from_gradients(feat.detach(), g))
    return torch.stack(cams, 1)


def build_value_maps(cams: torch.Tensor, present: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Turn foreground CAMs ``(B, C-1, h, w)`` into C-channel value maps.

    Each foreground channel is max-normalised to 1 (channels whose max is
    below ``eps`` stay zero), absent classes are zeroed, and the background
    channel is one minus the per-pixel foreground maximum.
    """
    peak = cams.amax((2, 3), keepdim=True)
    fg = torch.where(peak > eps, cams / peak.clamp_min(eps), torch.zeros_like(cams))
    fg = fg * present.to(fg.dtype)[:, :, None, None]
    bg = 1.0 - fg.amax(1, keepdim=True) if fg.shape[1] else torch.ones_like(cams[:, :1])
    return torch.cat([bg, fg], 1)
