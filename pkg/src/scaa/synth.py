"""Deterministic synthetic CT-like phantoms and the training augmentations.

A phantom is a noisy volume with a soft-tissue "body" and one organ per
class. Organ shapes come from three families: axis-aligned ellipsoids,
tubes running along the depth axis and small lumpy blobs. Every function is
a pure function of its arguments and seed.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

FAMILIES = ("ellipsoid", "tube", "blob")
DEFAULT_WINDOW = (-100.0, 500.0)


class PlacementError(RuntimeError):
    """An organ could not be placed without overlapping the ones already drawn."""


@dataclass
class VolumeSample:
    image: np.ndarray
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""
    placements: list = field(default_factory=list)  # per-class shape parameters, when known

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.image.shape != self.labels.shape or self.image.ndim != 3:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} must be equal 3-D shapes")
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass(frozen=True)
class OrganSpec:
    family: str
    size: Tuple[float, float]  # semi-axis / radius range in voxels
    intensity: Tuple[float, float]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; expected one of {FAMILIES}")
        if not 0 < self.size[0] <= self.size[1]:
            raise ValueError(f"bad size range {self.size}")
        if self.intensity[0] > self.intensity[1]:
            raise ValueError(f"bad intensity range {self.intensity}")


DEFAULT_ORGANS = (
    OrganSpec("ellipsoid", (9.0, 14.0), (100.0, 130.0)),  # large organ
    OrganSpec("tube", (3.0, 4.5), (350.0, 420.0)),  # elongated
    OrganSpec("blob", (3.5, 5.0), (-70.0, -45.0)),  # small, darker than the body around it
)


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    organs: Tuple[OrganSpec, ...] = DEFAULT_ORGANS
    background: Tuple[float, float] = (-20.0, 0.0)
    body: Tuple[float, float] = (30.0, 50.0)
    noise: float = 15.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    margin: int = 2
    max_tries: int = 200
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValueError(f"shape must be three positive extents, got {self.shape}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not self.organs:
            raise ValueError("need at least one organ class")

    @property
    def num_classes(self) -> int:
        return len(self.organs)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return replace(self, seed=int(seed))


# ---------------------------------------------------------------- spec files

def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def read_spec(path) -> PhantomSpec:
    """Parse a key-value phantom file (``[phantom]`` plus one ``[classN]`` section per organ)."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    if "phantom" not in cp:
        raise ValueError(f"{path}: missing [phantom] section")
    p = cp["phantom"]
    defaults = PhantomSpec()
    names = sorted((s for s in cp.sections() if s.startswith("class")), key=lambda s: int(s[5:]))
    organs = tuple(OrganSpec(cp[s]["family"].strip(), _floats(cp[s]["size"]), _floats(cp[s]["intensity"]))
                   for s in names) or defaults.organs
    if "num_classes" in p and int(p["num_classes"]) != len(organs):
        raise ValueError(f"{path}: num_classes={p['num_classes']} but {len(organs)} class sections")
    return PhantomSpec(
        shape=tuple(int(v) for v in _floats(p.get("shape", "64 64 64"))),
        organs=organs,
        background=_floats(p["background"]) if "background" in p else defaults.background,
        body=_floats(p["body"]) if "body" in p else defaults.body,
        noise=p.getfloat("noise", defaults.noise),
        spacing=_floats(p["spacing"]) if "spacing" in p else defaults.spacing,
        margin=p.getint("margin", defaults.margin),
        max_tries=p.getint("max_tries", defaults.max_tries),
        seed=p.getint("seed", defaults.seed),
    )


def write_spec(spec: PhantomSpec, path) -> None:
    def fmt(vals):
        return ", ".join(f"{v:g}" for v in vals)

    lines = ["[phantom]", f"shape = {fmt(spec.shape)}", f"num_classes = {spec.num_classes}",
             f"background = {fmt(spec.background)}", f"body = {fmt(spec.body)}", f"noise = {spec.noise:g}",
             f"spacing = {fmt(spec.spacing)}", f"margin = {spec.margin}", f"max_tries = {spec.max_tries}",
             f"seed = {spec.seed}"]
    for c, organ in enumerate(spec.organs, start=1):
        lines += ["", f"[class{c}]", f"family = {organ.family}", f"size = {fmt(organ.size)}",
                  f"intensity = {fmt(organ.intensity)}"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- shapes

def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    """Voxels with sum(((x - c) / a)^2) <= 1."""
    zz, yy, xx = _grid(shape)
    (cz, cy, cx), (az, ay, ax) = center, semi_axes
    return ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _draw_organ(organ: OrganSpec, shape, margin, rng):
    """Returns (mask, parameters) for one random placement of ``organ``."""
    d, h, w = shape
    lo, hi = organ.size
    if organ.family == "ellipsoid":
        axes = rng.uniform(lo, hi, size=3)
        center = [rng.uniform(a + margin, n - 1 - a - margin) if n - 1 - 2 * (a + margin) > 0 else (n - 1) / 2
                  for a, n in zip(axes, shape)]
        return ellipsoid_mask(shape, center, axes), {"center": center, "semi_axes": list(axes)}
    if organ.family == "tube":
        r = rng.uniform(lo, hi)
        cy = rng.uniform(r + margin, h - 1 - r - margin)
        cx = rng.uniform(r + margin, w - 1 - r - margin)
        span = rng.uniform(0.6, 0.9) * d
        z0 = rng.uniform(margin, d - span - margin)
        zz, yy, xx = _grid(shape)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (zz >= z0) & (zz <= z0 + span)
        return mask, {"center": [z0 + span / 2, cy, cx], "radius": r, "span": span}
    r = rng.uniform(lo, hi)
    center = np.array([rng.uniform(r * 1.5 + margin, n - 1 - r * 1.5 - margin) for n in shape])
    mask = ellipsoid_mask(shape, center, (r, r, r))
    for _ in range(3):  # lumps around the core
        offset = rng.standard_normal(3)
        offset *= 0.6 * r / np.linalg.norm(offset)
        mask |= ellipsoid_mask(shape, center + offset, (0.6 * r,) * 3)
    return mask, {"center": list(center), "radius": r}


def generate(spec: PhantomSpec) -> VolumeSample:
    """Draw one phantom; raises :class:`PlacementError` if an organ cannot be placed."""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(s) for s in spec.shape)
    labels = np.zeros(shape, np.uint8)
    placements = []
    image = np.full(shape, rng.uniform(*spec.background), dtype=np.float64)
    body_axes = [0.46 * n for n in shape]
    body = ellipsoid_mask(shape, [(n - 1) / 2 for n in shape], body_axes)
    image[body] = rng.uniform(*spec.body)
    for c, organ in enumerate(spec.organs, start=1):
        for _ in range(spec.max_tries):
            mask, params = _draw_organ(organ, shape, spec.margin, rng)
            # a one-voxel gap keeps organs separate
            if mask.any() and not (ndimage.binary_dilation(mask) & (labels > 0)).any():
                break
        else:
            raise PlacementError(f"class {c} ({organ.family}) could not be placed in {spec.max_tries} tries")
        labels[mask] = c
        placements.append(dict(params, family=organ.family))
        image[mask] = rng.uniform(*organ.intensity)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=shape)
    return VolumeSample(image.astype(np.float32), labels, spec.spacing, f"phantom-{spec.seed}", placements)


def make_dataset(spec: PhantomSpec, n: int, base_seed: Optional[int] = None) -> List[VolumeSample]:
    base = spec.seed if base_seed is None else base_seed
    return [generate(spec.with_seed(base + k)) for k in range(n)]


def normalize_intensity(image: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    """Clip to ``window`` and map linearly to [-1, 1]."""
    lo, hi = window
    if hi <= lo:
        raise ValueError("window upper bound must exceed lower bound")
    out = (np.clip(image, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    return out.astype(np.float32)


# ---------------------------------------------------------------- augmentation

def displacement_field(shape, grid_sigma: float, magnitude: float, rng) -> np.ndarray:
    """Smooth field [3, D, H, W]: normal offsets on a coarse grid, upsampled trilinearly.

    The coarse grid has a control point every ``grid_sigma`` voxels and
    offsets of standard deviation ``magnitude`` voxels. If the largest
    displacement derivative reaches 0.9 the field is scaled down to that
    bound so the warp stays invertible.
    """
    coarse = tuple(max(2, int(math.ceil(n / grid_sigma)) + 1) for n in shape)
    u = np.empty((3,) + tuple(shape))
    for ax in range(3):
        c = rng.normal(0.0, magnitude, size=coarse)
        u[ax] = ndimage.zoom(c, [n / k for n, k in zip(shape, coarse)], order=1, mode="nearest", grid_mode=True)
    grad = max(np.abs(np.gradient(u[ax], axis=k)).max() for ax in range(3) for k in range(3)) if magnitude else 0
    if grad >= 0.9:
        u *= 0.9 / grad
    return u


def elastic_transform(sample: VolumeSample, grid_sigma: float = 16.0, magnitude: float = 1.0,
                      seed: int = 0) -> VolumeSample:
    """Warp image (linear) and labels (nearest) with one shared smooth displacement."""
    if magnitude == 0:
        return replace(sample, image=sample.image.copy(), labels=sample.labels.copy())
    rng = np.random.default_rng(seed)
    u = displacement_field(sample.image.shape, grid_sigma, magnitude, rng)
    coords = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in sample.image.shape), indexing="ij")) + u
    image = ndimage.map_coordinates(sample.image.astype(np.float64), coords, order=1, mode="nearest")
    labels = ndimage.map_coordinates(sample.labels, coords, order=0, mode="nearest")
    return VolumeSample(image.astype(np.float32), labels, sample.spacing, sample.id)


def shift_volume(a: np.ndarray, shift: Sequence[int]) -> np.ndarray:
    """Integer translation with zero fill: ``out[i + s] = a[i]``."""
    out = np.zeros_like(a)
    src, dst = [], []
    for s, n in zip(shift, a.shape):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def jitter(sample: VolumeSample, intensity_sigma: float = 5.0,
           shift_voxels: Union[int, Sequence[int]] = 2, seed: int = 0) -> VolumeSample:
    """Additive intensity noise plus an integer translation of image and labels.

    ``shift_voxels`` is either an explicit per-axis shift or a bound ``s``
    for a uniformly random shift in [-s, s] on each axis.
    """
    rng = np.random.default_rng(seed)
    if np.ndim(shift_voxels) == 0:
        s = int(shift_voxels)
        shift = tuple(int(v) for v in rng.integers(-s, s + 1, size=3))
    else:
        shift = tuple(int(v) for v in shift_voxels)
    image = shift_volume(sample.image, shift)
    if intensity_sigma > 0:
        image = image + rng.normal(0.0, intensity_sigma, size=image.shape).astype(np.float32)
    return VolumeSample(image, shift_volume(sample.labels, shift), sample.spacing, sample.id)


def augment(sample: VolumeSample, seed: int, grid_sigma: float = 16.0, magnitude: float = 1.0,
            intensity_sigma: float = 5.0, shift_voxels: int = 2) -> VolumeSample:
    """Elastic warp followed by jitter, both seeded from ``seed``."""
    ss = np.random.SeedSequence(seed).spawn(2)
    warped = elastic_transform(sample, grid_sigma, magnitude, int(ss[0].generate_state(1)[0]))
    return jitter(warped, intensity_sigma, shift_voxels, int(ss[1].generate_state(1)[0]))
