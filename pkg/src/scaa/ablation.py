"""Attention statistics and the four-variant comparison."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .model import VARIANTS, AttentionRecord, ScaaConfig, ScaaNet, center_index
from .synth import VolumeSample
from .train import TrainConfig, infer, smooth, train

ABLATION_COLUMNS = ("variant", "params", "steps", "final_loss", "mean_dsc", "mean_hd95", "one_hot_fraction",
                    "entropy_positive_fraction")


def entropy(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def is_one_hot(weights) -> bool:
    w = np.asarray(weights)
    return bool(np.count_nonzero(w) == 1 and np.max(w) == 1.0)


def nearest_positions(center: int, depth: int, k: int = 3) -> List[int]:
    """The ``k`` depth indices closest to ``center`` (ties go to the lower index)."""
    return sorted(sorted(range(depth), key=lambda d: (abs(d - center), d))[:k])


@dataclass
class LocalityRow:
    scale: int
    depth: int
    slices: int
    mass: float      # mean attention on the k positions nearest each slice's own depth
    baseline: float  # k / depth, the mass under uniform attention

    @property
    def above_baseline(self) -> bool:
        return self.mass > self.baseline


def locality(records: Sequence[AttentionRecord], downsample: int = 2, k: int = 3) -> List[LocalityRow]:
    """Per scale, the attention mass near the depth index that matches each slice."""
    per_scale: Dict[int, list] = defaultdict(list)
    for r in records:
        d = r.weights.size
        near = nearest_positions(center_index(r.slice_z, r.scale, d, downsample), d, k)
        per_scale[r.scale].append((d, float(np.asarray(r.weights, dtype=np.float64)[near].sum()), r.slice_z))
    rows = []
    for scale in sorted(per_scale):
        items = per_scale[scale]
        d = items[0][0]
        rows.append(LocalityRow(scale, d, len({z for _, _, z in items}), float(np.mean([m for _, m, _ in items])),
                                min(k, d) / d))
    return rows


def slice_entropy_fraction(records: Sequence[AttentionRecord], scale: Optional[int] = None) -> float:
    """Fraction of slices whose attention (averaged over heads and scales) has positive entropy."""
    per_slice: Dict[int, list] = defaultdict(list)
    for r in records:
        if scale is None or r.scale == scale:
            per_slice[r.slice_z].append(entropy(r.weights))
    if not per_slice:
        return math.nan
    return float(np.mean([np.mean(v) > 0 for v in per_slice.values()]))


def one_hot_fraction(records: Sequence[AttentionRecord]) -> float:
    return float(np.mean([is_one_hot(r.weights) for r in records])) if records else math.nan


@dataclass
class AblationRow:
    variant: str
    params: int
    steps: int
    final_loss: float
    mean_dsc: float
    mean_hd95: float
    one_hot_fraction: float
    entropy_positive_fraction: float

    def cells(self):
        def f(v):
            return "" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"
        return (self.variant, self.params, self.steps, f(self.final_loss), f(self.mean_dsc), f(self.mean_hd95),
                f(self.one_hot_fraction), f(self.entropy_positive_fraction))


def run_ablation(train_set: Sequence[VolumeSample], test_set: Sequence[VolumeSample],
                 config_for: Callable[[str], ScaaConfig], cfg: TrainConfig, out_dir=None,
                 variants: Sequence[str] = VARIANTS, comments: Sequence[str] = (), smooth_window: int = 10,
                 progress: Optional[Callable[[str, object], None]] = None) -> List[AblationRow]:
    """Train every variant with identical data, seed and schedule; evaluate on ``test_set``."""
    rows = []
    for variant in variants:
        net = ScaaNet(config_for(variant), seed=cfg.seed)
        sub = Path(out_dir) / variant if out_dir is not None else None
        lg = train(net, train_set, cfg, out_dir=sub, comments=comments,
                   progress=(lambda r, v=variant: progress(v, r)) if progress else None)
        losses = lg.column("total")
        w = max(1, min(smooth_window, len(losses)))
        final = float(smooth(losses, w)[-1]) if len(losses) else math.nan
        dsc, hd, records = [], [], []
        for s in test_set:
            res = infer(net, s.image, gt_labels=s.labels, spacing=s.spacing)
            dsc.append(res.report.mean_dsc)
            hd.append(res.report.mean_hd95)
            records.extend(res.records)
        hd_ok = [h for h in hd if not math.isnan(h)]
        rows.append(AblationRow(variant, net.store.count(), len(lg.rows), final, float(np.mean(dsc)),
                                float(np.mean(hd_ok)) if hd_ok else math.nan,
                                one_hot_fraction(records), slice_entropy_fraction(records)))
    return rows
