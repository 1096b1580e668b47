"""Text relevance, segmentation logits and the semantic training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError


@dataclass
class TextFeatureSet:
    """Per-class text embeddings: ``base`` (N x D) and optionally ``augmented``."""

    class_names: list[str]
    base: np.ndarray
    augmented: np.ndarray | None = None
    unit_normalized: bool = True

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float32)
        if self.base.ndim != 2:
            raise DimensionError(f"text features must be N x D, got {self.base.shape}")
        if len(self.class_names) != self.base.shape[0]:
            raise DimensionError(f"{len(self.class_names)} class names for {self.base.shape[0]} feature rows")
        if self.augmented is not None:
            self.augmented = np.asarray(self.augmented, dtype=np.float32)
            if self.augmented.shape != self.base.shape:
                raise DimensionError(f"augmented features {self.augmented.shape} differ from base {self.base.shape}")
        for arr in (self.base, self.augmented):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericError("text features contain non-finite values")
        if self.unit_normalized:
            for arr in (self.base, self.augmented):
                if arr is not None and not np.allclose(np.linalg.norm(arr, axis=1), 1.0, atol=1e-6):
                    raise ValueError("text features flagged unit-normalized have rows with norm != 1")

    @property
    def num_classes(self) -> int:
        return self.base.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def for_augmentation(self) -> np.ndarray:
        return self.base if self.augmented is None else self.augmented


def relevance_logits(features, text) -> Tensor:
    """Cosine of each feature row (M x D) with each class row (N x D) -> M x N."""
    return ad.pairwise_cosine(ad.as_tensor(features), ad.as_tensor(text))


def segmentation_map(logits) -> np.ndarray:
    """Per-row argmax; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def distill_loss(rgb_pred, rgb_gt, feat_pred, feat_gt, eps: float = 1e-8) -> Tensor:
    """Mean over rays of ||C_hat - C||_2 - cos(F_hat, F)."""
    rgb_pred, feat_pred = ad.as_tensor(rgb_pred), ad.as_tensor(feat_pred)
    rgb_gt, feat_gt = ad.as_tensor(rgb_gt), ad.as_tensor(feat_gt)
    if rgb_pred.shape != rgb_gt.shape or feat_pred.shape != feat_gt.shape or rgb_pred.shape[0] != feat_pred.shape[0]:
        raise DimensionError(f"batch shapes disagree: rgb {rgb_pred.shape}/{rgb_gt.shape}, "
                             f"features {feat_pred.shape}/{feat_gt.shape}")
    color = ad.l2_norm(rgb_pred - rgb_gt, axis=-1)
    return (color - ad.cosine_similarity(feat_pred, feat_gt, eps)).mean()


def pseudo_label(rendered_label, text, temperature: float = 1.0) -> Tensor:
    """softmax_N(cos(L(r), F_t) / temperature): one distribution over classes per ray."""
    cos = relevance_logits(rendered_label, text)
    if temperature != 1.0:
        cos = cos * (1.0 / temperature)
    return ad.softmax(cos, axis=-1)


def ensemble_ce_loss(target, logits_dense, logits_rendered, gamma: float = 0.5,
                     temperature: float = 0.07, floor: float = 1e-30) -> Tensor:
    """Cross-entropy of the pseudo-label against both logit sets and their gamma-mixture.

    Logits are turned into distributions by a temperature softmax first; the
    loss is averaged over rays.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    target = ad.as_tensor(target)
    logits_dense, logits_rendered = ad.as_tensor(logits_dense), ad.as_tensor(logits_rendered)
    if not (target.shape == logits_dense.shape == logits_rendered.shape):
        raise DimensionError(f"shapes differ: {target.shape}, {logits_dense.shape}, {logits_rendered.shape}")
    inv_t = 1.0 / temperature
    log_pd = ad.log_softmax(logits_dense * inv_t, axis=-1)
    log_pr = ad.log_softmax(logits_rendered * inv_t, axis=-1)
    mix = ad.exp(log_pd) * gamma + ad.exp(log_pr) * (1.0 - gamma)
    log_mix = ad.log(ad.clamp_min(mix, floor))
    per_ray = ad.tsum(target * (log_pd + log_pr + log_mix), axis=-1)
    return -per_ray.mean()


def normalize_relevance(relevance: np.ndarray, flat_tol: float = 1e-12) -> np.ndarray:
    """Min-max normalise each class map (N x H x W) over its spatial extent.

    Classes whose map is flat (range below ``flat_tol``) become all zeros.
    """
    z = np.asarray(relevance)
    if not np.all(np.isfinite(z)):
        raise NumericError("relevance map contains non-finite values")
    flat = z.reshape(z.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    live = span >= flat_tol
    out = np.where(live, (flat - lo) / np.where(live, span, 1.0), 0.0)
    return out.reshape(z.shape).astype(z.dtype, copy=False)


def aug_loss(logits_rays, targets, eps: float = 1e-8) -> Tensor:
    """Negative mean cosine between each ray's logits and its normalised relevance row."""
    logits_rays, targets = ad.as_tensor(logits_rays), ad.as_tensor(targets)
    if logits_rays.shape != targets.shape:
        raise DimensionError(f"logits {logits_rays.shape} and targets {targets.shape} differ")
    return -ad.cosine_similarity(logits_rays, targets, eps).mean()


LOSS_TERMS = ("distill", "self_cross", "ensemble_ce", "aug")


def total_loss(terms: dict[str, Tensor | None], weights: dict[str, float]) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the named loss terms plus a float breakdown for logging.

    Terms that are ``None`` or carry zero weight are left out of the sum but a
    NaN in any provided term raises.
    """
    breakdown: dict[str, float] = {}
    total: Tensor | None = None
    for name, term in terms.items():
        if term is None:
            continue
        value = float(np.asarray(term.data).reshape(-1)[0])
        if not np.isfinite(value):
            raise NumericError(f"loss term '{name}' is not finite")
        breakdown[name] = value
        weight = float(weights.get(name, 1.0))
        if weight == 0.0:
            continue
        contribution = term * weight if weight != 1.0 else term
        total = contribution if total is None else total + contribution
    if total is None:
        total = Tensor(np.zeros(()))
    breakdown["total"] = float(total.data)
    return total, breakdown
