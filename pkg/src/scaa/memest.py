"""Analytic activation-memory and parameter-count estimates.

An :class:`ArchSpec` is an ordered list of layers that name their inputs.
Shapes are propagated symbolically; nothing is allocated. Memory counts the
value and the gradient of every flagged tensor as 32-bit floats:
``bytes = sum(elements * 2 * 4 * multiplicity)`` where the multiplicity is
the batch size for per-item layers (2D slices) and 1 for per-volume layers.
Convolution and normalisation outputs are flagged; upsampling outputs are
flagged too unless ``count_upsample=False``.

Layer-list files hold ``key = value`` header lines (``arch``, ``batch``)
followed by one layer per line, e.g.::

    input name=x shape=1,256,256
    conv name=c1 src=x out=64 k=3
    norm name=n1 src=c1
    pool name=p1 src=n1 factor=2
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .model import SCALES, ScaaConfig

GIB = 2 ** 30
BYTES_PER_VALUE = 4
KINDS = ("input", "conv", "norm", "pool", "up", "concat", "add", "adapool", "attend", "gpool", "tile")
MEMORY_KINDS = ("conv", "norm")
BUILTINS = ("unet2d", "unet3d", "scaa3dEncoder", "scaa2dPath", "scaa")

# Reference points the builtin configurations are compared against.
TARGETS = {
    "unet2d": {"gib": 2.86, "params": 34.51e6, "batch": 4},
    "unet3d": {"gib": 27.96, "batch": 1},
    "scaa3dEncoder": {"gib": 3.22, "batch": 1},
    "scaa2dPath": {"gib": 2.13, "batch": 4},
    "scaa": {"gib": 5.35, "params": 7.82e6, "batch": 4},
}


class ShapeChainError(ValueError):
    """A layer's inputs do not fit together."""


@dataclass
class Layer:
    kind: str
    name: str
    src: Tuple[str, ...] = ()
    out: int = 0
    k: int = 1
    factor: int = 2
    dims: int = 2
    shape: Tuple[int, ...] = ()
    size: Tuple[int, ...] = ()
    heads: int = 1
    per_item: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.src = tuple(self.src)
        self.shape = tuple(int(v) for v in self.shape)
        self.size = tuple(int(v) for v in self.size)

    def params(self, in_shapes) -> int:
        if self.kind == "conv":
            return self.out * in_shapes[0][0] * self.k ** self.dims + self.out
        if self.kind == "norm":
            return 2 * in_shapes[0][0]
        return 0

    def to_line(self) -> str:
        parts = [self.kind, f"name={self.name}"]
        if self.src:
            parts.append("src=" + ",".join(self.src))
        if self.kind == "input":
            parts.append("shape=" + ",".join(map(str, self.shape)))
        if self.kind == "conv":
            parts += [f"out={self.out}", f"k={self.k}"]
        if self.kind in ("pool", "up"):
            parts.append(f"factor={self.factor}")
        if self.kind == "adapool":
            parts.append("size=" + ",".join(map(str, self.size)))
        if self.kind == "attend":
            parts.append(f"heads={self.heads}")
        if self.kind in ("conv", "norm", "pool", "up"):
            parts.append(f"dims={self.dims}")
        if not self.per_item:
            parts.append("per_item=0")
        return " ".join(parts)


@dataclass
class ArchSpec:
    name: str
    layers: List[Layer]
    batch: int = 1

    def with_batch(self, batch: int) -> "ArchSpec":
        return replace(self, batch=int(batch))


@dataclass
class LayerReport:
    name: str
    kind: str
    shape: Tuple[int, ...]
    elements: int
    flagged: bool
    per_item: bool
    bytes: int
    params: int


@dataclass
class MemReport:
    arch: str
    batch: int
    layers: List[LayerReport] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.layers)

    @property
    def gib(self) -> float:
        return self.total_bytes / GIB

    @property
    def params(self) -> int:
        return sum(r.params for r in self.layers)

    def table(self) -> str:
        head = ("layer", "kind", "shape", "elements", "mem", "bytes", "params")
        rows = [(r.name, r.kind, "x".join(map(str, r.shape)), str(r.elements),
                 ("batch" if r.per_item else "once") if r.flagged else "-", str(r.bytes), str(r.params))
                for r in self.layers]
        widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        lines.append(f"total: {self.total_bytes} bytes = {self.gib:.4f} GB (GiB) at batch {self.batch}; "
                     f"parameters {self.params} ({self.params / 1e6:.2f} M)")
        return "\n".join(lines)

    def csv_rows(self):
        yield ("layer", "kind", "shape", "elements", "flagged", "per_item", "bytes", "params")
        for r in self.layers:
            yield (r.name, r.kind, "x".join(map(str, r.shape)), r.elements, int(r.flagged), int(r.per_item),
                   r.bytes, r.params)


# ---------------------------------------------------------------- shape propagation

def _out_shape(layer: Layer, ins: List[Tuple[int, ...]]) -> Tuple[int, ...]:
    k = layer.kind
    if k == "input":
        return layer.shape
    x = ins[0]
    if k in ("conv", "norm", "pool", "up") and len(x) - 1 != layer.dims:
        raise ShapeChainError(f"{layer.name}: {layer.dims}-D layer got input shape {x}")
    if k == "conv":
        return (layer.out,) + x[1:]
    if k == "norm":
        return x
    if k == "pool":
        if any(s % layer.factor for s in x[1:]):
            raise ShapeChainError(f"{layer.name}: spatial {x[1:]} not divisible by {layer.factor}")
        return (x[0],) + tuple(s // layer.factor for s in x[1:])
    if k == "up":
        return (x[0],) + tuple(s * layer.factor for s in x[1:])
    if k == "adapool":
        # pools the trailing axes only, so a [C, D, H, W] key map keeps its depth
        n = len(layer.size)
        if not 0 < n < len(x) or any(t > s for t, s in zip(layer.size, x[-n:])):
            raise ShapeChainError(f"{layer.name}: cannot pool {x[1:]} to {layer.size}")
        return x[:len(x) - n] + layer.size
    if k == "concat":
        if any(s[1:] != x[1:] for s in ins):
            raise ShapeChainError(f"{layer.name}: concat of mismatched spatial shapes {ins}")
        return (sum(s[0] for s in ins),) + x[1:]
    if k == "add":
        if any(s != x for s in ins):
            raise ShapeChainError(f"{layer.name}: add of mismatched shapes {ins}")
        return x
    if k == "attend":  # depth-weighted sum of a [C, D, H, W] map, heads stacked on channels
        return (layer.heads * x[0],) + x[2:]
    if k == "gpool":
        return (x[0],) + (1,) * (len(x) - 1)
    if k == "tile":  # broadcast a pooled vector over the spatial grid of the second input
        return (x[0],) + ins[1][1:]
    raise ValueError(k)


def propagate(spec: ArchSpec) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in spec.layers:
        if layer.name in shapes:
            raise ShapeChainError(f"duplicate layer name {layer.name!r}")
        missing = [s for s in layer.src if s not in shapes]
        if missing:
            raise ShapeChainError(f"{layer.name}: unknown source {missing}")
        if layer.kind != "input" and not layer.src:
            raise ShapeChainError(f"{layer.name}: needs a source")
        shapes[layer.name] = _out_shape(layer, [shapes[s] for s in layer.src])
    return shapes


def estimate(spec: ArchSpec, count_upsample: bool = True) -> MemReport:
    """Activation bytes (values + gradients, 32-bit) and parameters of ``spec``."""
    shapes = propagate(spec)
    flagged_kinds = MEMORY_KINDS + (("up",) if count_upsample else ())
    rep = MemReport(spec.name, spec.batch)
    for layer in spec.layers:
        shape = shapes[layer.name]
        n = math.prod(shape)
        flagged = layer.kind in flagged_kinds
        mult = spec.batch if layer.per_item else 1
        rep.layers.append(LayerReport(layer.name, layer.kind, shape, n, flagged, layer.per_item,
                                      n * 2 * BYTES_PER_VALUE * mult if flagged else 0,
                                      layer.params([shapes[s] for s in layer.src])))
    return rep


def count_params(spec: ArchSpec) -> int:
    shapes = propagate(spec)
    return sum(layer.params([shapes[s] for s in layer.src]) for layer in spec.layers)


# ---------------------------------------------------------------- builders

class _Builder:
    def __init__(self, dims: int, per_item: bool = True):
        self.layers: List[Layer] = []
        self.dims = dims
        self.per_item = per_item

    def add(self, kind, name, src=(), **kw) -> str:
        kw.setdefault("per_item", self.per_item)
        if kind in ("conv", "norm", "pool", "up"):
            kw.setdefault("dims", self.dims)
        self.layers.append(Layer(kind, name, tuple([src] if isinstance(src, str) else src), **kw))
        return name

    def conv_norm(self, name, src, out, k=3):
        return self.add("norm", f"{name}.norm", self.add("conv", f"{name}.conv", src, out=out, k=k))

    def block(self, name, src, out):
        """Two conv-norm stages (relu is in place and not stored)."""
        return self.conv_norm(f"{name}.2", self.conv_norm(f"{name}.1", src, out), out)

    def residual(self, name, src, cin, out):
        h = self.block(name, src, out)
        skip = self.add("conv", f"{name}.proj", src, out=out, k=1) if cin != out else src
        return self.add("add", f"{name}.add", (h, skip))


def _unet(name, dims, channels, size, num_classes, batch):
    """Plain U-Net: two conv-norm per level; decoder upsamples, halves channels with a conv-norm
    (2D) or concatenates directly (3D), then two conv-norm."""
    b = _Builder(dims)
    x = b.add("input", "x", shape=(1,) + (size,) * dims)
    skips = []
    for i, c in enumerate(channels):
        if i:
            x = b.add("pool", f"enc{i}.pool", x)
        x = b.block(f"enc{i}", x, c)
        skips.append(x)
    for i in range(len(channels) - 2, -1, -1):
        c = channels[i]
        x = b.add("up", f"dec{i}.up", x)
        if dims == 2:
            x = b.conv_norm(f"dec{i}.upconv", x, c)
        x = b.add("concat", f"dec{i}.cat", (x, skips[i]))
        x = b.block(f"dec{i}", x, c)
    b.add("conv", "head", x, out=num_classes, k=1)
    return ArchSpec(name, b.layers, batch)


def scaa_3d_layers(cfg: ScaaConfig, volume: Sequence[int]) -> Tuple[List[Layer], Dict[int, str]]:
    """Context encoder (per volume); returns the layers and the names of F^3D_2..5."""
    b = _Builder(3, per_item=False)
    x = b.add("input", "vol", shape=(1,) + tuple(volume))
    if cfg.downsample > 1:
        x = b.add("pool", "vol.down", x, factor=cfg.downsample)
    x = b.block("enc3d.stem", x, cfg.channels_3d[0])
    cin = cfg.channels_3d[0]
    feats = {}
    for k, i in enumerate(SCALES):
        c = cfg.channels_3d[k]
        x = b.add("pool", f"enc3d.s{i}.pool", x)
        x = b.residual(f"enc3d.s{i}.res1", x, cin, c)
        x = b.residual(f"enc3d.s{i}.res2", x, c, c)
        feats[i] = x
        cin = c
    up = b.add("up", "aux.up", feats[5], factor=16)
    b.add("conv", "aux.head", up, out=cfg.num_classes, k=1)
    b.add("gpool", "globe", feats[5])
    return b.layers, feats


def scaa_2d_layers(cfg: ScaaConfig, volume: Sequence[int], feats: Optional[Dict[int, str]] = None) -> List[Layer]:
    """Per-slice path. Without ``feats`` the 3D maps appear as (unflagged) inputs."""
    d, h, w = volume
    b = _Builder(2)
    if feats is None:
        feats = {}
        s = cfg.downsample
        for k, i in enumerate(SCALES):
            f = 2 ** (i - 1) * s
            feats[i] = b.add("input", f"f3d{i}", shape=(cfg.channels_3d[k], d // f, h // f, w // f), per_item=False)
        b.add("gpool", "globe", feats[5], per_item=False)
    x = b.add("input", "slice", shape=(1, h, w))
    skips = {}
    for i in range(1, 6):
        if i > 1:
            x = b.add("pool", f"enc2d.b{i}.pool", x)
        x = b.block(f"enc2d.b{i}", x, cfg.channels_2d[i - 1])
        if i > 1 and cfg.uses_msfa:
            k = i - 2
            m, e, c3 = cfg.heads[k], cfg.embed[k], cfg.channels_3d[k]
            if cfg.learned_attention:
                keys = b.add("conv", f"msfa{i}.wk", feats[i], out=m * e, k=1, dims=3, per_item=False)
                query = b.add("conv", f"msfa{i}.wq", x, out=m * e, k=1)
                p = min(cfg.pool_sizes[k], h // (cfg.downsample * 2 ** (i - 1)))
                b.add("adapool", f"msfa{i}.kpool", keys, size=(p, p), per_item=False)
                b.add("adapool", f"msfa{i}.qpool", query, size=(p, p))
            agg = b.add("attend", f"msfa{i}.agg", feats[i], heads=m)
            if cfg.downsample > 1:
                agg = b.add("up", f"msfa{i}.up", agg, factor=cfg.downsample)
            agg = b.add("conv", f"msfa{i}.wm", agg, out=c3, k=1)
            x = b.add("concat", f"msfa{i}.cat", (x, agg))
            x = b.block(f"msfa{i}.fuse", x, cfg.channels_fused[i - 1])
        skips[i] = x
    for i in range(4, 0, -1):
        x = b.add("up", f"dec{i}.up", x)
        x = b.add("concat", f"dec{i}.cat", (x, skips[i]))
        x = b.block(f"dec{i}", x, cfg.channels_fused[i - 1])
    if cfg.use_globe:
        g = b.add("tile", "globe.tile", ("globe", x))
        x = b.add("concat", "head.cat", (x, g))
    b.add("conv", "head", x, out=cfg.num_classes, k=1)
    return b.layers


def scaa_arch(cfg: ScaaConfig, volume=(256, 256, 256), batch: int = 4, part: str = "scaa") -> ArchSpec:
    """Layer list for the SCAA network; ``part`` is ``scaa``, ``scaa3dEncoder`` or ``scaa2dPath``."""
    if part == "scaa3dEncoder":
        return ArchSpec(part, scaa_3d_layers(cfg, volume)[0], batch)
    if part == "scaa2dPath":
        return ArchSpec(part, scaa_2d_layers(cfg, volume), batch)
    if part != "scaa":
        raise ValueError(f"unknown SCAA part {part!r}")
    layers3d, feats = scaa_3d_layers(cfg, volume)
    return ArchSpec(part, layers3d + scaa_2d_layers(cfg, volume, feats), batch)


def builtin_arch(name: str, num_classes: int = 11, batch: Optional[int] = None,
                 config: Optional[ScaaConfig] = None) -> ArchSpec:
    """Reference configurations at a 256^3 volume / 256^2 slices."""
    if name not in BUILTINS:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(BUILTINS)}")
    b = TARGETS[name]["batch"] if batch is None else batch
    if name == "unet2d":
        return _unet(name, 2, (64, 128, 256, 512, 1024), 256, num_classes, b)
    if name == "unet3d":
        return _unet(name, 3, (16, 32, 64, 128, 256), 256, num_classes, b)
    cfg = config or ScaaConfig(num_classes=num_classes)
    return scaa_arch(cfg, (256, 256, 256), b, name)


def scaa_total(num_classes: int = 11, batch: int = 4, config: Optional[ScaaConfig] = None):
    """(encoder report at batch 1, 2D-path report at ``batch``, combined report)."""
    cfg = config or ScaaConfig(num_classes=num_classes)
    return (estimate(scaa_arch(cfg, batch=1, part="scaa3dEncoder")),
            estimate(scaa_arch(cfg, batch=batch, part="scaa2dPath")),
            estimate(scaa_arch(cfg, batch=batch, part="scaa")))


def param_deviation_note(name: str, params: int) -> Optional[str]:
    target = TARGETS.get(name, {}).get("params")
    if target is None:
        return None
    dev = (params - target) / target * 100
    note = f"parameters {params / 1e6:.3f} M vs reference {target / 1e6:.2f} M ({dev:+.1f}%)"
    if name == "scaa":
        note += ("; block internals are not fully specified (fusion block depth, 3D stem and "
                 "residual layout, projection convolutions), which accounts for the gap")
    elif name == "unet2d":
        note += "; decoder up-convolution layout and the output head are assumptions"
    return note


# ---------------------------------------------------------------- layer-list files

def _parse_value(key: str, value: str):
    if key == "name":
        return value
    if key in ("shape", "size"):
        return tuple(int(v) for v in value.split(","))
    if key == "src":
        return tuple(v for v in value.split(",") if v)
    if key == "per_item":
        return value not in ("0", "false", "no")
    if key in ("out", "k", "factor", "dims", "heads"):
        return int(value)
    raise ValueError(f"unknown layer attribute {key!r}")


def parse_arch(text: str, name: str = "custom") -> ArchSpec:
    header = {"arch": name, "batch": "1"}
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.split()[0] not in KINDS and "=" in line:
            key, value = (p.strip() for p in line.split("=", 1))
            header[key] = value
            continue
        kind, *attrs = line.split()
        kw = {}
        try:
            for a in attrs:
                key, value = a.split("=", 1)
                kw[key] = _parse_value(key, value)
            layers.append(Layer(kind, **kw))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return ArchSpec(header["arch"], layers, int(header["batch"]))


def read_arch(path) -> ArchSpec:
    return parse_arch(Path(path).read_text(), Path(path).stem)


def format_arch(spec: ArchSpec) -> str:
    buf = io.StringIO()
    buf.write(f"arch = {spec.name}\nbatch = {spec.batch}\n")
    for layer in spec.layers:
        buf.write(layer.to_line() + "\n")
    return buf.getvalue()


def write_arch(spec: ArchSpec, path) -> None:
    Path(path).write_text(format_arch(spec))
