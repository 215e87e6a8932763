"""The hybrid 2D/3D segmentation network.

A low-resolution 3D encoder runs once per volume and yields context maps at
scales 2..5. Each axial slice goes through a 2D encoder; at scales 2..5 the
2D features query the 3D map's depth axis with scaled dot-product attention
(multi-slice feature aggregation, MSFA) and the attended 3D features are
fused back in before the next encoder stage. A U-Net style decoder produces
per-class sigmoid masks.

Resolution bookkeeping for a volume of depth D and downsample factor s:
the 2D map at scale i has extent H / 2**(i-1); the 3D map at scale i has
extent D / (s * 2**(i-1)).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .nn import (Conv, ConvBlock, ParamStore, ResidualBlock3D, conv_block_params, conv_params, init_parameters,
                 residual_block_params)
from .tensor import Tensor

VARIANTS = ("ca", "cca", "scaa", "scaa-star")
SCALES = (2, 3, 4, 5)
HEAD_INIT_SCALE = 0.05
HEAD_BIAS_INIT = math.log(0.01 / 0.99)


@dataclass(frozen=True)
class ScaaConfig:
    """Architecture hyperparameters.

    Per-scale tuples for the 3D/attention side cover scales 2..5; the 2D
    encoder and fused channel tuples cover scales 1..5.
    """

    num_classes: int = 3
    downsample: int = 2
    channels_3d: tuple = (24, 32, 64, 64)
    channels_2d: tuple = (64, 96, 128, 192, 256)
    channels_fused: tuple = (64, 96, 128, 192, 256)
    embed: tuple = (2, 2, 4, 4)
    heads: tuple = (2, 2, 4, 4)
    pool_sizes: tuple = (16, 8, 4, 4)
    variant: str = "scaa"
    use_globe: Optional[bool] = None

    def __post_init__(self):
        for name in ("channels_3d", "channels_2d", "channels_fused", "embed", "heads", "pool_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("channels_3d", "embed", "heads", "pool_sizes"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs 4 entries (scales 2..5)")
        for name in ("channels_2d", "channels_fused"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"{name} needs 5 entries (scales 1..5)")
        values = (self.channels_3d + self.channels_2d + self.channels_fused + self.embed + self.heads
                  + self.pool_sizes)
        if min(values) < 1 or self.num_classes < 1:
            raise ValueError("all channel/head/pool entries and num_classes must be >= 1")
        if self.channels_fused[0] != self.channels_2d[0]:
            raise ValueError("scale-1 fused channels must equal scale-1 2D channels (F_1 = F^2D_1)")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        if self.use_globe is None:
            object.__setattr__(self, "use_globe", self.variant != "scaa-star")

    @property
    def uses_msfa(self) -> bool:
        return self.variant != "ca"

    @property
    def learned_attention(self) -> bool:
        return self.variant in ("scaa", "scaa-star")

    @property
    def min_divisor(self) -> int:
        """Volume extents must be multiples of this (four 3D pools after downsampling)."""
        return self.downsample * 16

    def scale3d_factor(self, i: int) -> int:
        """Full-resolution voxels per 3D-map voxel at scale ``i``."""
        return self.downsample * 2 ** (i - 1)

    @classmethod
    def full(cls, **kw) -> "ScaaConfig":
        """Full-width network."""
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "ScaaConfig":
        """Reduced widths for CPU training on 64^3 phantoms."""
        base = dict(channels_3d=(8, 12, 16, 16), channels_2d=(16, 24, 32, 48, 64),
                    channels_fused=(16, 24, 32, 48, 64), embed=(2, 2, 4, 4), heads=(2, 2, 4, 4),
                    pool_sizes=(16, 8, 4, 4))
        base.update(kw)
        return cls(**base)

    @classmethod
    def micro(cls, **kw) -> "ScaaConfig":
        """Tiny widths for finite-difference checks."""
        base = dict(channels_3d=(2, 2, 3, 3), channels_2d=(2, 3, 3, 3, 4), channels_fused=(2, 3, 3, 3, 4),
                    embed=(1, 2, 1, 1), heads=(2, 1, 2, 1), pool_sizes=(2, 2, 1, 1))
        base.update(kw)
        return cls(**base)

    def with_variant(self, variant: str) -> "ScaaConfig":
        return replace(self, variant=variant, use_globe=None)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaaConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class AttentionRecord:
    scale: int
    slice_z: int
    head: int
    weights: np.ndarray


@dataclass
class ContextFeatures:
    features: Dict[int, Tensor]
    globe: Tensor
    aux_logits: Tensor


@dataclass
class ForwardOutput:
    masks: Tensor
    aux_logits: Tensor
    records: List[AttentionRecord] = field(default_factory=list)
    context: Optional[ContextFeatures] = None

    @property
    def aux_probs(self) -> Tensor:
        return ops.sigmoid(self.aux_logits)


class _Msfa:
    """Parameters of one attention/fusion stage."""

    def __init__(self, store, cfg: ScaaConfig, i: int):
        k = i - 2
        self.scale = i
        c2, c3 = cfg.channels_2d[i - 1], cfg.channels_3d[k]
        self.heads, self.embed, self.pool = cfg.heads[k], cfg.embed[k], cfg.pool_sizes[k]
        if cfg.learned_attention:
            self.wk = Conv(store, f"msfa{i}.wk", c3, self.heads * self.embed, 1, 3)
            self.wq = Conv(store, f"msfa{i}.wq", c2, self.heads * self.embed, 1, 2)
        else:
            self.wk = self.wq = None
        self.wm = Conv(store, f"msfa{i}.wm", self.heads * c3, c3, 1, 2)
        self.fuse = ConvBlock(store, f"msfa{i}.fuse", c2 + c3, cfg.channels_fused[i - 1])


class ScaaNet:
    """Network parameters plus the forward computation.

    Parameters
    ----------
    config : ScaaConfig
    dtype : numpy dtype
        float32 for training, float64 for gradient checks.
    seed : int
        Initialisation seed.
    """

    def __init__(self, config: ScaaConfig, dtype=np.float32, seed: int = 0):
        self.config = cfg = config
        self.store = store = ParamStore(dtype)
        c3 = cfg.channels_3d
        self.stem = ConvBlock(store, "enc3d.stem", 1, c3[0], dims=3)
        self.stages3d = {}
        cin = c3[0]
        for k, i in enumerate(SCALES):
            self.stages3d[i] = (ResidualBlock3D(store, f"enc3d.s{i}.res1", cin, c3[k]),
                                ResidualBlock3D(store, f"enc3d.s{i}.res2", c3[k], c3[k]))
            cin = c3[k]
        self.aux_head = Conv(store, "aux.head", c3[-1], cfg.num_classes, 1, 3)

        c2 = cfg.channels_2d
        cf = cfg.channels_fused
        self.enc2d = {}
        cin = 1
        for i in range(1, 6):
            self.enc2d[i] = ConvBlock(store, f"enc2d.b{i}", cin, c2[i - 1])
            cin = cf[i - 1]
        self.msfa_blocks = {i: _Msfa(store, cfg, i) for i in SCALES} if cfg.uses_msfa else {}
        self.dec = {}
        for i in range(4, 0, -1):
            self.dec[i] = ConvBlock(store, f"dec{i}", cf[i] + cf[i - 1], cf[i - 1])
        head_in = cf[0] + (c3[-1] if cfg.use_globe else 0)
        self.head = Conv(store, "head", head_in, cfg.num_classes, 1, 2)

        init_parameters(store, seed)
        # the heads read un-normalised features; full-scale weights saturate the sigmoids.
        # Organs are small, so every pixel starts at a low foreground probability.
        for conv in (self.aux_head, self.head):
            conv.weight.data *= HEAD_INIT_SCALE
            conv.bias.data[...] = HEAD_BIAS_INIT
        self.encode_3d_calls = 0

    @property
    def dtype(self):
        return self.store.dtype

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    # -- 3D context ------------------------------------------------------
    def encode_3d(self, volume) -> ContextFeatures:
        """Context maps F^3D_2..5, the global descriptor and auxiliary logits.

        ``volume`` is ``[1, D, H, W]`` (normalised intensities).
        """
        cfg = self.config
        v = self._as_tensor(volume)
        if v.ndim != 4 or v.shape[0] != 1:
            raise ops.ShapeError(f"encode_3d expects [1, D, H, W], got {v.shape}")
        _check_divisible(v.shape[1:], cfg.min_divisor, "volume")
        self.encode_3d_calls += 1
        x = ops.avg_pool(v, cfg.downsample, dims=3) if cfg.downsample > 1 else v
        x, _ = self.stem(x)
        feats = {}
        for i in SCALES:
            x = ops.maxpool(x, 2, dims=3)
            res1, res2 = self.stages3d[i]
            x = res2(res1(x))
            feats[i] = x
        globe = ops.mean(feats[5], axis=(1, 2, 3))
        up = ops.upsample(feats[5], 16, "nearest", dims=3)
        aux = self.aux_head(up)
        return ContextFeatures(feats, globe, aux)

    # -- 2D path ---------------------------------------------------------
    def encode_2d(self, slices, fuse=None) -> Dict[int, Tensor]:
        """Encoder features F_1..F_5 for ``[N, 1, H, W]`` slices.

        ``fuse(i, feat)`` (scales 2..5) replaces the stage output before it
        is pooled into the next stage; without it the plain F^2D_i are
        returned.
        """
        x = self._as_tensor(slices)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        _check_divisible(x.shape[2:], 16, "slice")
        feats = {}
        for i in range(1, 6):
            f, _ = self.enc2d[i](x)
            if fuse is not None and i >= 2:
                f = fuse(i, f)
            feats[i] = f
            if i < 5:
                x = ops.maxpool(f, 2, dims=2)
        return feats

    def attention(self, i: int, f2d: Tensor, f3d: Tensor):
        """Pre-softmax responses ``r`` [N, heads, D] and weights ``a``."""
        blk = self.msfa_blocks[i]
        c3, d, h3, w3 = f3d.shape
        p, q = min(blk.pool, h3), min(blk.pool, w3)
        n = f2d.shape[0]
        keys = ops.adaptive_avg_pool(blk.wk(f3d), (p, q))
        keys = ops.reshape(keys, (blk.heads, blk.embed, d, p, q))
        query = ops.adaptive_avg_pool(blk.wq(f2d), (p, q))
        query = ops.reshape(query, (n, blk.heads, blk.embed, p, q))
        r = ops.mul(ops.contract("nhexy,hedxy->nhd", query, keys), 1.0 / math.sqrt(blk.embed * p * q))
        return r, ops.softmax(r, axis=2)

    def center_attention(self, i: int, slice_z: Sequence[int], depth: int) -> Tensor:
        """One-hot attention on the depth index corresponding to each slice (C-CA)."""
        heads = self.msfa_blocks[i].heads
        a = np.zeros((len(slice_z), heads, depth), dtype=self.dtype)
        for n, z in enumerate(slice_z):
            a[n, :, center_index(z, i, depth, self.config.downsample)] = 1.0
        return Tensor(a)

    def aggregate(self, i: int, f2d: Tensor, f3d: Tensor, slice_z: Sequence[int]):
        """Attention-weighted depth sums of the unprojected 3D map.

        Returns ``(agg, a)``: ``agg`` is [N, heads * C3, H3, W3] with heads
        stacked along channels, ``a`` is [N, heads, D].
        """
        c3, d, h3, w3 = f3d.shape
        n = f2d.shape[0]
        if self.config.learned_attention:
            _, a = self.attention(i, f2d, f3d)
        else:
            a = self.center_attention(i, slice_z, d)
        agg = ops.contract("cdxy,nhd->nhcxy", f3d, a)
        return ops.reshape(agg, (n, self.msfa_blocks[i].heads * c3, h3, w3)), a

    def msfa(self, i: int, f2d: Tensor, f3d: Tensor, slice_z: Sequence[int]):
        """Fuse attended 3D context into the 2D map at scale ``i``.

        Returns the fused map F_i [N, C(F_i), H, W] and one
        :class:`AttentionRecord` per (slice, head).
        """
        if i not in SCALES:
            raise ValueError(f"msfa scale must be in {SCALES}, got {i}")
        cfg = self.config
        blk = self.msfa_blocks[i]
        c3, d, h3, w3 = f3d.shape
        n, _, h, w = f2d.shape
        if (h, w) != (h3 * cfg.downsample, w3 * cfg.downsample):
            raise ops.ShapeError(f"msfa scale {i}: 2D map {h}x{w} does not match 3D map {h3}x{w3} "
                                 f"at downsample {cfg.downsample}")
        if len(slice_z) != n:
            raise ValueError("need one slice index per 2D map")
        agg, a = self.aggregate(i, f2d, f3d, slice_z)
        if cfg.downsample > 1:
            agg = ops.upsample(agg, cfg.downsample, "bilinear", dims=2)
        agg = blk.wm(agg)
        fused, _ = blk.fuse(ops.concat([f2d, agg], axis=1))
        records = [AttentionRecord(i, int(slice_z[j]), hh, a.data[j, hh].copy())
                   for j in range(n) for hh in range(blk.heads)]
        return fused, records

    def decode_2d(self, feats: Dict[int, Tensor], globe: Optional[Tensor]) -> Tensor:
        """Per-class mask probabilities [N, C, H, W]."""
        missing = [i for i in range(1, 6) if i not in feats]
        if missing:
            raise ValueError(f"decode_2d: missing scales {missing}")
        x = feats[5]
        for i in range(4, 0, -1):
            x = ops.upsample2x(x, "nearest", dims=2)
            x, _ = self.dec[i](ops.concat([x, feats[i]], axis=1))
        if self.config.use_globe:
            if globe is None:
                raise ValueError("this variant needs the global descriptor")
            n, _, h, w = x.shape
            g = ops.expand(ops.reshape(globe, (1, globe.shape[0], 1, 1)), (n, globe.shape[0], h, w))
            x = ops.concat([x, g], axis=1)
        return ops.sigmoid(self.head(x))

    def forward_slices(self, ctx: ContextFeatures, slices, slice_z: Sequence[int]) -> ForwardOutput:
        """2D path for ``[N, 1, H, W]`` slices given cached 3D context."""
        records: List[AttentionRecord] = []
        if self.config.uses_msfa:
            def fuse(i, f):
                out, rec = self.msfa(i, f, ctx.features[i], slice_z)
                records.extend(rec)
                return out
        else:
            fuse = None
        feats = self.encode_2d(slices, fuse)
        masks = self.decode_2d(feats, ctx.globe)
        return ForwardOutput(masks, ctx.aux_logits, records, ctx)

    def forward(self, volume, slice_indices: Sequence[int]) -> ForwardOutput:
        """Masks for the given axial slices; the 3D encoder runs once."""
        v = self._as_tensor(volume)
        if v.ndim == 3:
            v = ops.reshape(v, (1,) + v.shape)
        depth = v.shape[1]
        bad = [z for z in slice_indices if not 0 <= z < depth]
        if bad:
            raise IndexError(f"slice indices {bad} outside depth {depth}")
        ctx = self.encode_3d(v)
        slices = Tensor(v.data[0, list(slice_indices)][:, None])
        return self.forward_slices(ctx, slices, list(slice_indices))


def center_index(z: int, i: int, depth: int, downsample: int = 2) -> int:
    """Depth index of the scale-``i`` 3D map that contains full-resolution slice ``z``."""
    return min(max(z // (downsample * 2 ** (i - 1)), 0), depth - 1)


def count_parameters(config: ScaaConfig) -> int:
    """Closed-form learnable-scalar count for ``config``."""
    c3, c2, cf = config.channels_3d, config.channels_2d, config.channels_fused
    n = conv_block_params(1, c3[0], 3)
    cin = c3[0]
    for c in c3:
        n += residual_block_params(cin, c) + residual_block_params(c, c)
        cin = c
    n += conv_params(c3[-1], config.num_classes, 1, 3)
    cin = 1
    for i in range(5):
        n += conv_block_params(cin, c2[i])
        cin = cf[i]
    if config.uses_msfa:
        for k, i in enumerate(SCALES):
            he = config.heads[k] * config.embed[k]
            if config.learned_attention:
                n += conv_params(c3[k], he, 1, 3) + conv_params(c2[i - 1], he, 1, 2)
            n += conv_params(config.heads[k] * c3[k], c3[k], 1, 2)
            n += conv_block_params(c2[i - 1] + c3[k], cf[i - 1])
    for i in range(4, 0, -1):
        n += conv_block_params(cf[i] + cf[i - 1], cf[i - 1])
    n += conv_params(cf[0] + (c3[-1] if config.use_globe else 0), config.num_classes, 1, 2)
    return n


def _check_divisible(extents, divisor, what):
    if any(e % divisor for e in extents):
        raise ops.ShapeError(f"{what} extents {tuple(extents)} must be multiples of {divisor}")
