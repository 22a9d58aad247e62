"""Losses, the one-stage consistency training step, and the offline
self-training baseline."""
from __future__ import annotations

import logging
import math
import pickle
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import apply_geometry, strong_augment, weak_augment
from .config import IGNORE_INDEX, ExperimentConfig
from .data import SegDataset, image_level_labels
from .metrics import CalibrationBins, ConfusionMatrix, score_distribution
from .network import SegNet, build_value_maps, grad_cams, hypercolumn
from .sgc import FUSION_VARIANTS, SGCHead, fusion_variant, harden, pseudo_label

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, batch_ids: Sequence[str] = ()):
        super().__init__(f"{message}; batch ids: {list(batch_ids)}")
        self.batch_ids = list(batch_ids)


# ---------------------------------------------------------------------------
# losses


def supervised_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-wise cross-entropy averaged over non-ignored pixels of the batch.

    Returns a graph-connected zero when every pixel is ignored.
    """
    valid = target != IGNORE_INDEX
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target.long(), ignore_index=IGNORE_INDEX, reduction="sum") / n


def consistency_loss(strong_logits: torch.Tensor, y_tilde: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Soft cross-entropy against a constant pseudo label over valid pixels.

    ``valid`` is ``(B, H, W)`` bool; CutOut and padding pixels should be False.
    """
    y_tilde = y_tilde.detach()
    ce = -(y_tilde * F.log_softmax(strong_logits, 1)).sum(1)
    if valid is None:
        valid = torch.ones_like(ce, dtype=torch.bool)
    n = int(valid.sum())
    if n == 0:
        return strong_logits.sum() * 0.0
    return (ce * valid.to(ce.dtype)).sum() / n


def classification_loss(class_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-class binary cross-entropy for multi-label presence."""
    return F.binary_cross_entropy_with_logits(class_logits, labels.to(class_logits.dtype))


def sgc_loss(sgc_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the SGC maps against ground truth (same kernel as the
    supervised loss). Its inputs are detached upstream, so it reaches only the
    SGC head parameters."""
    return supervised_loss(sgc_logits, target)


def poly_lr(base_lr: float, iteration: int, total: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - min(iteration, total) / total) ** power


# ---------------------------------------------------------------------------
# batches


@dataclass
class LabeledBatch:
    images: torch.Tensor
    masks: torch.Tensor
    labels: torch.Tensor
    ids: list[str]


@dataclass
class UnlabeledBatch:
    weak: torch.Tensor
    strong: torch.Tensor
    valid: torch.Tensor
    labels: torch.Tensor
    ids: list[str]


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().float()


def make_labeled_batch(ds: SegDataset, indices, cfg: ExperimentConfig, rng: np.random.Generator) -> LabeledBatch:
    images, masks, labels = [], [], []
    for i in indices:
        x, y = ds[i]
        xw, yw, _ = weak_augment(x, y, cfg.augment, rng)
        images.append(xw)
        masks.append(yw)
        labels.append(image_level_labels(y, ds.num_classes))
    return LabeledBatch(
        _to_tensor(images),
        torch.from_numpy(np.stack(masks).astype(np.int64)),
        torch.from_numpy(np.stack(labels)),
        [ds.ids[i] for i in indices],
    )


def make_unlabeled_batch(ds: SegDataset, indices, cfg: ExperimentConfig, rng: np.random.Generator) -> UnlabeledBatch:
    weak, strong, valid, labels = [], [], [], []
    for i in indices:
        x, y = ds[i]
        xw, _, rec = weak_augment(x, None, cfg.augment, rng)
        xs, erased = strong_augment(xw, cfg.augment, rng)
        inside = apply_geometry(np.ones(x.shape[:2], dtype=np.uint8), rec, 0, is_mask=True).astype(bool)
        weak.append(xw)
        strong.append(xs)
        valid.append(inside & ~erased)
        # image-level labels are only consumed in image_level mode
        labels.append(image_level_labels(y, ds.num_classes))
    return UnlabeledBatch(
        _to_tensor(weak),
        _to_tensor(strong),
        torch.from_numpy(np.stack(valid)),
        torch.from_numpy(np.stack(labels)),
        [ds.ids[i] for i in indices],
    )


def _draw(rng: np.random.Generator, n: int, k: int) -> list[int]:
    return rng.choice(n, size=k, replace=k > n).tolist()


# ---------------------------------------------------------------------------
# training


@dataclass
class LossReport:
    l_s: float = 0.0
    l_u: float = 0.0
    l_x: float = 0.0
    l_sa: float = 0.0
    total: float = 0.0
    valid_pixel_counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Owns the segmentation network, the SGC head and one SGD optimiser.

    ``train_step`` implements one iteration of weak/strong consistency
    training; ``fit`` runs the loop with evaluation callbacks.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.train.seed)
        self.model = SegNet.from_config(cfg.model)
        feat_dim = self.model.widths[3] if cfg.model.features == "last" else self.model.hypercolumn_dim
        self.sgc = SGCHead(feat_dim, cfg.model.num_classes, cfg.model.embed_dim)
        self.optimizer = torch.optim.SGD(
            list(self.model.parameters()) + list(self.sgc.parameters()),
            lr=cfg.train.base_lr,
            momentum=cfg.train.momentum,
            weight_decay=cfg.train.weight_decay,
        )
        self.iteration = 0
        self.audit: dict | None = None

    # -- helpers --------------------------------------------------------------

    def sgc_logits(self, fps, presents, out_size) -> torch.Tensor:
        """SGC logits for one or more feature packs, resized to ``out_size``.

        CAMs and hypercolumns enter as constants: nothing the SGC head produces
        can send gradient back into the network.
        """
        cams = torch.cat([grad_cams(fp, self.model) for fp in fps])
        value = build_value_maps(cams, torch.cat(presents))
        feats = torch.cat([hypercolumn(fp, self.cfg.model.features).detach() for fp in fps])
        logits = self.sgc(value, feats)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)

    def set_lr(self) -> float:
        lr = poly_lr(self.cfg.train.base_lr, self.iteration, self.cfg.train.iterations, self.cfg.train.lr_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def _finish(self, parts: dict, ids: list[str], counts: dict) -> LossReport:
        total = sum(parts.values())
        for name, value in parts.items():
            if not torch.isfinite(value):
                raise NumericalAbort(f"non-finite {name} at iteration {self.iteration}", ids)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.iteration += 1
        vals = {k: float(v.detach()) for k, v in parts.items()}
        return LossReport(
            l_s=vals.get("l_s", 0.0),
            l_u=vals.get("l_u", 0.0),
            l_x=vals.get("l_x", 0.0),
            l_sa=vals.get("l_sa", 0.0),
            total=sum(vals.values()),
            valid_pixel_counts=counts,
        )

    # -- steps ----------------------------------------------------------------

    def supervised_step(self, lab: LabeledBatch, extra: LabeledBatch | None = None) -> LossReport:
        """Plain cross-entropy step, optionally on the union with an extra
        (e.g. offline pseudo-labelled) batch."""
        self.model.train()
        self.set_lr()
        images, masks, ids = lab.images, lab.masks, lab.ids
        if extra is not None:
            images = torch.cat([images, extra.images])
            masks = torch.cat([masks, extra.masks])
            ids = ids + extra.ids
        fp = self.model(images)
        l_s = supervised_loss(fp.decoder_logits, masks)
        return self._finish({"l_s": l_s}, ids, {"l_s": int((masks != IGNORE_INDEX).sum())})

    def train_step(self, lab: LabeledBatch, unl: UnlabeledBatch) -> LossReport:
        cfg = self.cfg
        if cfg.train.mode == "supervised_only":
            return self.supervised_step(lab)
        self.model.train()
        self.sgc.train()
        self.set_lr()
        image_level = cfg.train.mode == "image_level"
        audit = cfg.train.debug_audit

        fl = self.model(lab.images)
        l_s = supervised_loss(fl.decoder_logits, lab.masks)

        # weak unlabeled view: only needs a graph when its classifier logits
        # are supervised (image_level) or when auditing the stop-gradient
        with torch.set_grad_enabled(image_level or audit):
            fu = self.model(unl.weak)
        cls_l = self.model.classify(fl)
        if image_level:
            cls_u = self.model.classify(fu)
            l_x = classification_loss(torch.cat([cls_l, cls_u]), torch.cat([lab.labels, unl.labels]))
            present_u = unl.labels
        else:
            l_x = classification_loss(cls_l, lab.labels)
            present_u = torch.sigmoid(self.model.classify(fu).detach()) > 0.5

        bl = lab.images.shape[0]
        sgc = self.sgc_logits([fl, fu], [lab.labels, present_u], lab.images.shape[-2:])
        l_sa = sgc_loss(sgc[:bl], lab.masks)

        with torch.no_grad():
            y_tilde = pseudo_label(fu.decoder_logits.detach(), sgc[bl:].detach(), cfg.fusion)

        fs = self.model(unl.strong)
        l_u = consistency_loss(fs.decoder_logits, y_tilde, unl.valid)

        parts = {"l_s": l_s, "l_u": l_u, "l_x": l_x, "l_sa": l_sa}
        if audit:
            self.audit = self._audit(parts, fu)
        counts = {
            "l_s": int((lab.masks != IGNORE_INDEX).sum()),
            "l_u": int(unl.valid.sum()),
            "l_sa": int((lab.masks != IGNORE_INDEX).sum()),
        }
        return self._finish(parts, lab.ids + unl.ids, counts)

    def _audit(self, parts: dict, fu) -> dict:
        """Gradients that must be exactly zero (or absent) by construction."""
        net_params = [p for p in self.model.parameters()]
        g_sa = torch.autograd.grad(parts["l_sa"], net_params, retain_graph=True, allow_unused=True)
        weak_acts = [fu.decoder_logits] + [s for s in fu.stages if s.requires_grad]
        g_u = torch.autograd.grad(parts["l_u"], weak_acts, retain_graph=True, allow_unused=True) if weak_acts[0].requires_grad else []
        g_theta = torch.autograd.grad(parts["l_sa"], list(self.sgc.parameters()), retain_graph=True, allow_unused=True)
        zero = lambda gs: all(g is None or bool((g == 0).all()) for g in gs)  # noqa: E731
        return {
            "l_sa_network_grad_zero": zero(g_sa),
            "l_u_weak_grad_zero": zero(g_u),
            "l_sa_theta_grad_nonzero": any(g is not None and bool((g != 0).any()) for g in g_theta),
        }

    # -- loop -----------------------------------------------------------------

    def fit(
        self,
        labeled: SegDataset,
        unlabeled: SegDataset | None = None,
        val: SegDataset | None = None,
        extra: SegDataset | None = None,
        on_eval: Callable[[int, LossReport, dict], None] | None = None,
        on_step: Callable[[int, LossReport], None] | None = None,
    ) -> dict:
        """Run ``cfg.train.iterations`` steps. Returns the final evaluation.

        ``extra`` is a pseudo-labelled dataset for student training; it is
        only used in ``supervised_only`` mode. Labeled, unlabeled and extra
        sampling use independent generators, so disabling one branch never
        perturbs another.
        """
        cfg = self.cfg
        seed = cfg.train.seed
        rng_l = np.random.default_rng([seed, 1])
        rng_u = np.random.default_rng([seed, 2])
        rng_x = np.random.default_rng([seed, 3])
        result: dict = {}
        report = LossReport()
        for it in range(cfg.train.iterations):
            lab = make_labeled_batch(labeled, _draw(rng_l, len(labeled), cfg.train.labeled_batch), cfg, rng_l)
            if cfg.train.mode == "supervised_only":
                ext = None
                if extra is not None and len(extra):
                    ext = make_labeled_batch(extra, _draw(rng_x, len(extra), cfg.train.unlabeled_batch), cfg, rng_x)
                report = self.supervised_step(lab, ext)
            else:
                if unlabeled is None or not len(unlabeled):
                    raise ValueError(f"mode {cfg.train.mode!r} needs unlabeled data")
                unl = make_unlabeled_batch(unlabeled, _draw(rng_u, len(unlabeled), cfg.train.unlabeled_batch), cfg, rng_u)
                report = self.train_step(lab, unl)
                if self.audit is not None and not (self.audit["l_sa_network_grad_zero"] and self.audit["l_u_weak_grad_zero"]):
                    raise AssertionError(f"stop-gradient audit failed at iteration {it}: {self.audit}")
            if on_step is not None:
                on_step(it + 1, report)
            last = it + 1 == cfg.train.iterations
            if val is not None and (last or (cfg.train.eval_every and (it + 1) % cfg.train.eval_every == 0)):
                result = evaluate(self, val, variants=cfg.train.mode != "supervised_only")
                if on_eval is not None:
                    on_eval(it + 1, report, result)
        return result

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        params = {f"net.{k}": v for k, v in self.model.state_dict().items()}
        params.update({f"sgc.{k}": v for k, v in self.sgc.state_dict().items()})
        return {
            "params": params,
            "manifest": {k: list(v.shape) for k, v in params.items()},
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
            "iteration": self.iteration,
        }

    def save(self, path) -> None:
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path) -> "Trainer":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        cfg = ExperimentConfig.from_dict(blob["config"])
        trainer = cls(cfg)
        params = blob["params"]
        trainer.model.load_state_dict({k[4:]: v for k, v in params.items() if k.startswith("net.")})
        trainer.sgc.load_state_dict({k[4:]: v for k, v in params.items() if k.startswith("sgc.")})
        trainer.iteration = blob.get("iteration", 0)
        return trainer


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# evaluation


def _batches(ds: SegDataset, size: int = 16):
    for start in range(0, len(ds), size):
        items = [ds[i] for i in range(start, min(start + size, len(ds)))]
        shapes = {x.shape for x, _ in items}
        if len(shapes) == 1:
            yield items
        else:
            for item in items:
                yield [item]


@torch.no_grad()
def evaluate(trainer: Trainer, ds: SegDataset, variants: bool = True, presence: str = "predicted") -> dict:
    """mIoU of the decoder and, optionally, ECE of each pseudo-label variant.

    ``presence`` chooses which classes gate the SGC value maps: classifier
    predictions (``"predicted"``) or ground-truth image labels.
    """
    model, sgc, cfg = trainer.model, trainer.sgc, trainer.cfg
    model.eval()
    sgc.eval()
    c = cfg.model.num_classes
    cm = ConfusionMatrix(c)
    bins = {v: CalibrationBins() for v in (FUSION_VARIANTS if variants else ("decoder_only",))}
    variant_cm = {v: ConfusionMatrix(c) for v in FUSION_VARIANTS} if variants else {}
    for items in _batches(ds):
        x = _to_tensor([it[0] for it in items])
        y = np.stack([it[1] for it in items])
        fp = model(x)
        pred = fp.decoder_logits.argmax(1).numpy()
        cm.update(pred, y)
        if not variants:
            probs = torch.softmax(fp.decoder_logits, 1).double().numpy()
            for b in range(len(items)):
                score_distribution(bins["decoder_only"], probs[b], y[b])
            continue
        if presence == "predicted":
            present = torch.sigmoid(model.classify(fp)) > 0.5
        else:
            present = torch.from_numpy(np.stack([image_level_labels(m, c) for m in y]))
        m_logits = trainer.sgc_logits([fp], [present], x.shape[-2:])
        for v in FUSION_VARIANTS:
            probs = fusion_variant(fp.decoder_logits, m_logits, v, cfg.fusion).double().numpy()
            variant_cm[v].update(probs.argmax(1), y)
            for b in range(len(items)):
                score_distribution(bins[v], probs[b], y[b])
    model.train()
    sgc.train()
    miou, per_class = cm.miou()
    out = {"miou": miou, "per_class_iou": [None if math.isnan(v) else float(v) for v in per_class]}
    out["ece"] = {v: b.ece() for v, b in bins.items()}
    if variants:
        # argmax quality of each pseudo-label construction on held-out data
        out["variant_miou"] = {v: cm_v.miou()[0] for v, cm_v in variant_cm.items()}
    return out


# ---------------------------------------------------------------------------
# offline self-training


class PseudoLabeledDataset(SegDataset):
    def __init__(self, images: SegDataset, masks: dict[str, np.ndarray]):
        self.images = images
        self.num_classes = images.num_classes
        self.ids = [sid for sid in images.ids if sid in masks]
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        self._masks = masks

    def __getitem__(self, index: int):
        sid = self.ids[index]
        return self.images[self.images.index_of(sid)][0], self._masks[sid]


@torch.no_grad()
def generate_offline_pseudo_labels(trainer: Trainer, ds: SegDataset, threshold: float = 0.5):
    """Harden the teacher's decoder softmax at ``threshold``.

    Returns ``(masks_by_id, ignore_fraction_by_id)``.
    """
    trainer.model.eval()
    masks, ignored = {}, {}
    for start in range(0, len(ds), 16):
        idx = list(range(start, min(start + 16, len(ds))))
        x = _to_tensor([ds[i][0] for i in idx])
        hard = harden(torch.softmax(trainer.model(x).decoder_logits, 1), threshold).numpy().astype(np.uint8)
        for k, i in enumerate(idx):
            sid = ds.ids[i]
            masks[sid] = hard[k]
            ignored[sid] = float((hard[k] == IGNORE_INDEX).mean())
    trainer.model.train()
    return masks, ignored


def train_student(cfg: ExperimentConfig, labeled: SegDataset, pseudo: SegDataset | None, val: SegDataset | None = None, on_eval=None):
    """Fresh network trained with cross-entropy on labeled plus pseudo-labelled data."""
    cfg = cfg.replace(**{"train.mode": "supervised_only"})
    trainer = Trainer(cfg)
    result = trainer.fit(labeled, val=val, extra=pseudo, on_eval=on_eval)
    return trainer, result
