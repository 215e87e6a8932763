"""Soft-Dice training losses and the DSC / 95% Hausdorff evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    """``alpha`` weights false positives, ``beta`` false negatives."""

    alpha: float = 0.5
    beta: float = 0.5
    eps: float = 1e-5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


DEFAULT_LOSS = LossConfig()


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 0) -> np.ndarray:
    """Binary masks for classes 1..C (label 0 is background), stacked on ``axis``."""
    labels = np.asarray(labels)
    masks = np.stack([labels == c for c in range(1, num_classes + 1)], axis=axis)
    return masks.astype(np.float32)


def class_phi(m: Tensor, g: np.ndarray, cfg: LossConfig = DEFAULT_LOSS, class_axis: int = 0) -> Tensor:
    """Soft Dice score per class, reduced over every axis except ``class_axis``.

    phi = tp / (tp + alpha * fp + beta * fn + eps) with tp = sum(m g),
    fp = sum(m (1 - g)), fn = sum((1 - m) g).
    """
    g = np.asarray(g, dtype=m.dtype)
    if g.shape != m.shape:
        raise ops.ShapeError(f"prediction shape {m.shape} != ground truth shape {g.shape}")
    axes = tuple(a for a in range(m.ndim) if a != class_axis % m.ndim)
    tp = ops.sum(ops.mul(m, Tensor(g)), axis=axes)
    sum_m = ops.sum(m, axis=axes)
    sum_g = Tensor(g.sum(axis=axes))
    fp = ops.sub(sum_m, tp)
    fn = ops.sub(sum_g, tp)
    denom = ops.add(ops.add(ops.add(tp, ops.mul(fp, cfg.alpha)), ops.mul(fn, cfg.beta)), cfg.eps)
    return ops.div(tp, denom)


def soft_dice_phi(m: Tensor, g: np.ndarray, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Soft Dice score of one mask summed over all of its elements."""
    flat_m = ops.reshape(m, (1, m.size))
    g = np.asarray(g)
    if g.shape != m.shape:
        raise ops.ShapeError(f"prediction shape {m.shape} != ground truth shape {g.shape}")
    return ops.reshape(class_phi(flat_m, g.reshape(1, -1), cfg), ())


def loss_2d(masks: Tensor, gts: np.ndarray, cfg: LossConfig = DEFAULT_LOSS, class_axis: Optional[int] = None) -> Tensor:
    """sum over classes of (1 - phi_c).

    ``masks`` is [C, ...] or batched [N, C, ...]; the class axis defaults to
    1 for 4-D and higher inputs and 0 otherwise.
    """
    gts = np.asarray(gts)
    if class_axis is None:
        class_axis = 1 if masks.ndim >= 4 else 0
    if gts.ndim != masks.ndim or gts.shape[class_axis] != masks.shape[class_axis]:
        raise ops.ShapeError(f"class count mismatch: prediction {masks.shape}, ground truth {gts.shape}")
    phi = class_phi(masks, gts, cfg, class_axis)
    c = masks.shape[class_axis]
    return ops.sub(Tensor(np.asarray(c, dtype=masks.dtype)), ops.sum(phi))


def loss_3d(aux_logits: Tensor, labels: np.ndarray, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Dice loss of the auxiliary 3D head against labels decimated to its grid."""
    labels = np.asarray(labels)
    c = aux_logits.shape[0]
    factors = [s // t for s, t in zip(labels.shape, aux_logits.shape[1:])]
    if any(f < 1 or s != t * f for f, s, t in zip(factors, labels.shape, aux_logits.shape[1:])):
        raise ops.ShapeError(f"label volume {labels.shape} is not an integer multiple of {aux_logits.shape[1:]}")
    small = labels[tuple(slice(None, None, f) for f in factors)]
    return loss_2d(ops.sigmoid(aux_logits), one_hot(small, c), cfg, class_axis=0)


def loss_total(l2d: Tensor, l3d: Tensor) -> Tensor:
    return ops.add(l2d, l3d)


# ---------------------------------------------------------------- metrics

def _binary_pair(m, g):
    m = np.asarray(m).astype(bool)
    g = np.asarray(g).astype(bool)
    if m.shape != g.shape:
        raise ops.ShapeError(f"mask shapes differ: {m.shape} vs {g.shape}")
    return m, g


def dsc(m, g) -> float:
    """Dice similarity coefficient in percent; two empty masks score 100."""
    m, g = _binary_pair(m, g)
    total = int(m.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(m, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def surface_distances(m, g, spacing=None) -> np.ndarray:
    """Pooled directed boundary distances m->g and g->m."""
    m, g = _binary_pair(m, g)
    spacing = np.ones(m.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    pm = np.argwhere(boundary(m)) * spacing
    pg = np.argwhere(boundary(g)) * spacing
    d_mg, _ = cKDTree(pg).query(pm)
    d_gm, _ = cKDTree(pm).query(pg)
    return np.concatenate([d_mg, d_gm])


def hd95(m, g, spacing=None) -> float:
    """95th percentile (linear interpolation) of pooled symmetric boundary distances.

    Returns NaN when either mask is empty.
    """
    m, g = _binary_pair(m, g)
    if not m.any() or not g.any():
        return math.nan
    return float(np.percentile(surface_distances(m, g, spacing), 95))


@dataclass
class MetricReport:
    dsc: List[float] = field(default_factory=list)
    hd95: List[float] = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc)) if self.dsc else math.nan

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.hd95 if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def rows(self):
        """CSV rows: header then ``class, dsc_percent, hd95`` (empty hd95 when undefined)."""
        out = [("class", "dsc_percent", "hd95")]
        for c, (d, h) in enumerate(zip(self.dsc, self.hd95), start=1):
            out.append((str(c), f"{d:.6f}", "" if math.isnan(h) else f"{h:.6f}"))
        return out


def evaluate(pred_labels, gt_labels, num_classes: int, spacing: Optional[Sequence[float]] = None) -> MetricReport:
    """Per-class DSC and 95% HD for integer label volumes."""
    pred, gt = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ops.ShapeError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    report = MetricReport()
    for c in range(1, num_classes + 1):
        report.dsc.append(dsc(pred == c, gt == c))
        report.hd95.append(hd95(pred == c, gt == c, spacing))
    return report
