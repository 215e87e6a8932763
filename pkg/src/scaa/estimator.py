"""scikit-learn style wrapper around the network, trainer and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import evaluate
from .model import VARIANTS, ScaaConfig, ScaaNet
from .synth import DEFAULT_WINDOW, VolumeSample
from .train import TrainConfig, infer, train

PRESETS = ("full", "toy", "micro")


def model_config(preset: str, num_classes: int, variant: str) -> ScaaConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown model preset {preset!r}; choose from {', '.join(PRESETS)}")
    return getattr(ScaaConfig, preset)(num_classes=num_classes, variant=variant)


def _volumes(X) -> np.ndarray:
    X = check_array(np.asarray(X, dtype=np.float32), allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected volumes shaped [n, D, H, W] or [D, H, W], got {X.shape}")
    return X


class ScaaSegmenter(BaseEstimator):
    """Multi-organ segmenter; ``X`` holds raw-intensity volumes, ``y`` integer label maps (0 = background)."""

    def __init__(self, preset: str = "toy", variant: str = "scaa-star", num_classes=None, lr: float = 1e-4,
                 epochs: int = 150, max_steps=None, slices: int = 16, augment: bool = True, seed: int = 0,
                 window=DEFAULT_WINDOW, batch: int = 16):
        self.preset = preset
        self.variant = variant
        self.num_classes = num_classes
        self.lr = lr
        self.epochs = epochs
        self.max_steps = max_steps
        self.slices = slices
        self.augment = augment
        self.seed = seed
        self.window = window
        self.batch = batch

    def fit(self, X, y, spacing=(1.0, 1.0, 1.0)):
        X = _volumes(X)
        y = np.asarray(y)
        if y.ndim == 3:
            y = y[None]
        if y.shape != X.shape:
            raise ValueError(f"labels {y.shape} do not match volumes {X.shape}")
        if y.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        n_classes = int(self.num_classes or y.max())
        if n_classes < 1:
            raise ValueError("labels contain no foreground class")
        dataset = [VolumeSample(x, lab.astype(np.uint8), tuple(spacing), f"train-{i}") for i, (x, lab) in
                   enumerate(zip(X, y))]
        self.net_ = ScaaNet(model_config(self.preset, n_classes, self.variant), seed=self.seed)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, max_steps=self.max_steps, slices=self.slices,
                          augment=self.augment, seed=self.seed, variant=self.variant, window=tuple(self.window))
        self.log_ = train(self.net_, dataset, cfg)
        self.num_classes_ = n_classes
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-class sigmoid probabilities, ``[n, C, D, H, W]``."""
        check_is_fitted(self, "net_")
        X = _volumes(X)
        return np.stack([infer(self.net_, x, self.window, self.batch).probs.transpose(1, 0, 2, 3) for x in X])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _volumes(X)
        return np.stack([infer(self.net_, x, self.window, self.batch).labels for x in X])

    def score(self, X, y) -> float:
        """Mean DSC (percent) over classes and volumes."""
        pred = self.predict(X)
        y = np.asarray(y)
        if y.ndim == 3:
            y = y[None]
        return float(np.mean([evaluate(p, g, self.num_classes_).mean_dsc for p, g in zip(pred, y)]))
