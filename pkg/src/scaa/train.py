"""Training loop, Adam, inference and the finite-difference harness.

One step takes one volume: the 3D context encoder runs once, a batch of
axial slices without replacement goes through the 2D path, and the 2D and
auxiliary 3D Dice losses are summed before a single Adam update. Every
random choice in step ``k`` is drawn from a generator seeded with
``(seed, k)``, so a run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .gradcheck import check_gradients
from .losses import DEFAULT_LOSS, LossConfig, MetricReport, evaluate, loss_2d, loss_3d, loss_total, one_hot
from .model import AttentionRecord, ScaaConfig, ScaaNet
from .synth import DEFAULT_WINDOW, VolumeSample, augment, normalize_intensity
from .tensor import Tensor, no_grad
from .volume_io import Checkpoint, load_params, read_checkpoint, write_checkpoint, write_table

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l2d", "l3d", "total", "wall_ms")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. ``max_steps`` caps ``epochs * len(dataset)``."""

    lr: float = 1e-4
    epochs: int = 150
    slices: int = 16
    variant: str = "scaa-star"
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0
    max_steps: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    window: tuple = DEFAULT_WINDOW
    loss: LossConfig = DEFAULT_LOSS

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.slices < 1:
            raise ValueError("slices must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def total_steps(self, n_volumes: int) -> int:
        steps = self.epochs * n_volumes
        return steps if self.max_steps is None else min(steps, self.max_steps)


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def update(self, store, lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, t in store.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.dtype)

    def load(self, m: dict, v: dict, step: int) -> None:
        for name in self.m:
            if name not in m or name not in v:
                raise KeyError(f"optimizer state lacks {name!r}")
            self.m[name][...] = m[name]
            self.v[name][...] = v[name]
        self.step = int(step)


@dataclass
class StepResult:
    step: int
    l2d: float
    l3d: float
    total: float
    wall_ms: float = 0.0
    slices: tuple = ()


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), int(stream)])


def sample_slices(depth: int, n: int, rng) -> List[int]:
    """``n`` distinct axial indices (all of them if ``n >= depth``), sorted."""
    if n >= depth:
        return list(range(depth))
    return sorted(int(z) for z in rng.choice(depth, size=n, replace=False))


def compute_loss(net: ScaaNet, image: np.ndarray, labels: np.ndarray, slice_z: Sequence[int],
                 loss_cfg: LossConfig = DEFAULT_LOSS):
    """Forward one normalised volume and return ``(l2d, l3d, total, output)`` tensors."""
    c = net.config.num_classes
    out = net.forward(image[None], slice_z)
    gts = np.stack([one_hot(labels[z], c) for z in slice_z]).astype(net.dtype)
    l2d = loss_2d(out.masks, gts, loss_cfg)
    l3d = loss_3d(out.aux_logits, labels, loss_cfg)
    return l2d, l3d, loss_total(l2d, l3d), out


def train_step(net: ScaaNet, sample: VolumeSample, cfg: TrainConfig, state: AdamState, step: int) -> StepResult:
    """One optimizer update on one volume."""
    t0 = time.perf_counter()
    if cfg.augment:
        seed = int(np.random.SeedSequence([cfg.seed, step, 1]).generate_state(1)[0])
        sample = augment(sample, seed)
    image = normalize_intensity(sample.image, cfg.window)
    slice_z = sample_slices(image.shape[0], cfg.slices, step_rng(cfg.seed, step))
    net.store.zero_grad()
    l2d, l3d, total, _ = compute_loss(net, image, sample.labels, slice_z, cfg.loss)
    values = float(l2d.data), float(l3d.data), float(total.data)
    if not all(math.isfinite(v) for v in values):
        worst = max(float(np.abs(t.data).max()) for _, t in net.store.items())
        raise TrainingDivergedError(f"non-finite loss at step {step} on {sample.id or 'volume'}: "
                                    f"l2d={values[0]} l3d={values[1]} (largest |parameter| {worst:.3g})")
    total.backward()
    state.update(net.store, cfg.lr)
    return StepResult(step, *values, wall_ms=(time.perf_counter() - t0) * 1e3, slices=tuple(slice_z))


def volume_for_step(step: int, n: int, seed: int) -> int:
    """Index of the volume used at ``step``: a fresh permutation every epoch."""
    epoch, pos = divmod(step, n)
    return int(np.random.default_rng([int(seed), int(epoch), 7]).permutation(n)[pos])


@dataclass
class TrainLog:
    rows: List[StepResult] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def write(self, path, timing: bool = False, comments: Sequence[str] = ()) -> None:
        rows = [(r.step, f"{r.l2d:.9g}", f"{r.l3d:.9g}", f"{r.total:.9g}",
                 f"{r.wall_ms:.1f}" if timing else "") for r in self.rows]
        write_table(path, LOG_COLUMNS, rows, comments)


def make_checkpoint(net: ScaaNet, state: AdamState, step: int, cfg: Optional[TrainConfig] = None,
                    meta: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(net.store.state(), dict(state.m), dict(state.v), state.step, step,
                      {"model": net.config.to_dict(), "train": _train_dict(cfg) if cfg else {}}, meta or {})


def _train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["window"] = list(cfg.window)
    return d


def restore(path, net: Optional[ScaaNet] = None, dtype=np.float32):
    """Rebuild (or fill) a model and optimizer state from a checkpoint file."""
    ckpt = read_checkpoint(path)
    if net is None:
        net = ScaaNet(ScaaConfig.from_dict(ckpt.config["model"]), dtype=dtype)
    load_params(net.store, ckpt.params)
    train = ckpt.config.get("train") or {}
    state = AdamState(net.store, train.get("beta1", 0.9), train.get("beta2", 0.999), train.get("adam_eps", 1e-8))
    if ckpt.adam_m:
        state.load(ckpt.adam_m, ckpt.adam_v, ckpt.adam_step)
    return net, state, ckpt


def train(net: ScaaNet, dataset: Sequence[VolumeSample], cfg: TrainConfig, out_dir=None,
          state: Optional[AdamState] = None, start_step: int = 0, timing: bool = False,
          comments: Sequence[str] = (), progress: Optional[Callable[[StepResult], None]] = None) -> TrainLog:
    """Run ``cfg.total_steps`` updates; write ``train_log.csv`` and checkpoints into ``out_dir``."""
    if not dataset:
        raise ValueError("dataset is empty")
    state = state or AdamState(net.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_rows = TrainLog()
    total = cfg.total_steps(len(dataset))
    meta = {"command": "\n".join(comments)} if comments else None
    for step in range(start_step, total):
        sample = dataset[volume_for_step(step, len(dataset), cfg.seed)]
        res = train_step(net, sample, cfg, state, step)
        log_rows.rows.append(res)
        if progress is not None:
            progress(res)
        log.debug("step %d l2d %.4f l3d %.4f", step, res.l2d, res.l3d)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(out / f"ckpt_{step + 1:06d}.bin", make_checkpoint(net, state, step + 1, cfg, meta))
    if out is not None:
        write_checkpoint(out / "final.bin", make_checkpoint(net, state, total, cfg, meta))
        log_rows.write(out / "train_log.csv", timing, comments)
    return log_rows


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Means over consecutive non-overlapping blocks of ``window`` values."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


# ---------------------------------------------------------------- inference

@dataclass
class InferResult:
    labels: np.ndarray
    probs: np.ndarray
    records: List[AttentionRecord]
    report: Optional[MetricReport] = None


def infer(net: ScaaNet, image: np.ndarray, window=DEFAULT_WINDOW, batch: int = 16, threshold: float = 0.5,
          gt_labels: Optional[np.ndarray] = None, spacing=None) -> InferResult:
    """Segment every axial slice; the 3D context is computed once.

    A voxel takes the most probable class among those above ``threshold``
    and background otherwise.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ops.ShapeError(f"expected a [D, H, W] volume, got {image.shape}")
    vol = normalize_intensity(image, window)[None]
    depth = vol.shape[1]
    probs = np.zeros((depth, net.config.num_classes) + vol.shape[2:], dtype=np.float32)
    records: List[AttentionRecord] = []
    with no_grad():
        ctx = net.encode_3d(vol)
        for z0 in range(0, depth, batch):
            zs = list(range(z0, min(depth, z0 + batch)))
            out = net.forward_slices(ctx, Tensor(vol[0, zs][:, None].astype(net.dtype)), zs)
            probs[zs] = out.masks.data
            records.extend(out.records)
    labels = np.where(probs.max(axis=1) > threshold, probs.argmax(axis=1) + 1, 0).astype(np.uint8)
    report = evaluate(labels, gt_labels, net.config.num_classes, spacing) if gt_labels is not None else None
    return InferResult(labels, probs, records, report)


# ---------------------------------------------------------------- gradient harness

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float
    skipped: Dict[str, int] = field(default_factory=dict)  # coordinates replaced because the loss has a kink there

    @property
    def failures(self) -> List[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def rows(self):
        return [(n, f"{e:.3e}", self.skipped.get(n, 0), "pass" if e < self.tolerance else "FAIL")
                for n, e in self.errors.items()]


def micro_model(seed: int = 0, variant: str = "scaa", num_classes: int = 2) -> ScaaNet:
    """float64 micro network with perturbed parameters (non-trivial norms and biases)."""
    net = ScaaNet(ScaaConfig.micro(variant=variant, num_classes=num_classes), dtype=np.float64, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for _, t in net.store.items():
        t.data[...] += 0.1 * rng.standard_normal(t.shape)
    return net


MICRO_VOLUME = (64, 32, 32)


def grad_check(model_factory: Callable[[int], ScaaNet] = micro_model, tolerance: float = 1e-4, coords: int = 50,
               seed: int = 0, slices: Sequence[int] = (9, 40)) -> GradCheckReport:
    """Finite-difference check of the full training loss w.r.t. every parameter tensor.

    Up to ``coords`` random coordinates per tensor, central differences in
    float64 on a random micro volume with random labels.
    """
    net = model_factory(seed)
    rng = np.random.default_rng([seed, 1])
    image = rng.standard_normal(MICRO_VOLUME)
    labels = rng.integers(0, net.config.num_classes + 1, size=MICRO_VOLUME)

    def loss():
        return compute_loss(net, image, labels, list(slices))[2]

    skipped: Dict[str, int] = {}
    errors = check_gradients(loss, dict(net.store.items()), max_coords=coords, rng=np.random.default_rng([seed, 2]),
                             stats=skipped)
    return GradCheckReport(errors, tolerance, skipped)
