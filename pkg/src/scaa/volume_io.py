"""On-disk formats: raw volumes with JSON sidecars, checkpoints, and CSV exports.

Volume
    ``<name>.json`` sidecar plus ``<name>.img.raw`` (float32) and
    ``<name>.lbl.raw`` (uint8), little-endian, row-major D, H, W.

Checkpoint
    ``b"SCAACKPT"`` magic, uint32 format version, uint64 manifest length, the
    UTF-8 JSON manifest, then the float32 little-endian payload. The manifest
    lists every tensor (section, name, shape, byte offset into the payload)
    in parameter-store order, followed by the optimizer moments.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .synth import VolumeSample

VOLUME_FORMAT = "scaa-volume"
VOLUME_VERSION = 1
CHECKPOINT_MAGIC = b"SCAACKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class HeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# ---------------------------------------------------------------- volumes

def _payload_paths(header_path: Path):
    stem = header_path.name[:-5] if header_path.name.endswith(".json") else header_path.name
    return header_path.with_name(stem + ".img.raw"), header_path.with_name(stem + ".lbl.raw")


def write_volume(path, sample: VolumeSample, num_classes: Optional[int] = None, meta: Optional[dict] = None) -> None:
    """Write ``sample`` as ``path`` (JSON sidecar) plus two raw payload files.

    ``meta`` is stored verbatim under the sidecar's ``meta`` key.
    """
    path = Path(path)
    img_path, lbl_path = _payload_paths(path)
    header = OrderedDict(
        format=VOLUME_FORMAT, version=VOLUME_VERSION, id=sample.id, dims=list(sample.image.shape),
        spacing=list(sample.spacing), byte_order="little",
        num_classes=int(num_classes if num_classes is not None else sample.labels.max()),
        image=OrderedDict(file=img_path.name, dtype="float32"),
        labels=OrderedDict(file=lbl_path.name, dtype="uint8"),
    )
    if meta:
        header["meta"] = meta
    img_path.write_bytes(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
    lbl_path.write_bytes(np.ascontiguousarray(sample.labels, dtype="u1").tobytes())
    path.write_text(json.dumps(header, indent=2) + "\n")


def read_header(path) -> dict:
    try:
        header = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{path}: cannot read header ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != VOLUME_FORMAT:
        raise HeaderError(f"{path}: not a {VOLUME_FORMAT} header")
    for key in ("dims", "spacing", "image", "labels"):
        if key not in header:
            raise HeaderError(f"{path}: header lacks {key!r}")
    if header.get("byte_order", "little") != "little":
        raise HeaderError(f"{path}: only little-endian payloads are supported")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)):
        raise DimensionMismatchError(f"{path}: dims must be three positive integers, got {dims!r}")
    return header


def _read_payload(header_path: Path, entry: dict, dims, expected_dtype: str) -> np.ndarray:
    dtype_name = entry.get("dtype")
    if dtype_name not in _DTYPES:
        raise UnknownDtypeError(f"{header_path}: unknown payload dtype {dtype_name!r}")
    if dtype_name != expected_dtype:
        raise UnknownDtypeError(f"{header_path}: payload dtype {dtype_name!r}, expected {expected_dtype!r}")
    dtype = _DTYPES[dtype_name]
    raw = (header_path.parent / entry["file"]).read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{entry['file']}: {len(raw)} bytes, expected {expected} for dims {dims}")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def read_volume(path, expected_shape: Optional[Sequence[int]] = None) -> VolumeSample:
    path = Path(path)
    header = read_header(path)
    dims = tuple(header["dims"])
    if expected_shape is not None and tuple(expected_shape) != dims:
        raise DimensionMismatchError(f"{path}: dims {dims} != expected {tuple(expected_shape)}")
    image = _read_payload(path, header["image"], dims, "float32")
    labels = _read_payload(path, header["labels"], dims, "uint8")
    return VolumeSample(image.astype(np.float32), labels, tuple(header["spacing"]), header.get("id", ""))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_step: int = 0
    step: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


_SECTIONS = (("param", "params"), ("adam_m", "adam_m"), ("adam_v", "adam_v"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for section, attr in _SECTIONS:
        for name, arr in getattr(ckpt, attr).items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(OrderedDict(section=section, name=name, shape=list(np.shape(arr)), offset=offset))
            chunks.append(data)
            offset += len(data)
    manifest = OrderedDict(version=CHECKPOINT_VERSION, step=int(ckpt.step), adam_step=int(ckpt.adam_step),
                           config=ckpt.config, meta=ckpt.meta, tensors=entries, payload_bytes=offset)
    blob = json.dumps(manifest, sort_keys=False).encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob))
    return head + blob + b"".join(chunks)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 20:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    payload = raw[20 + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    ckpt = Checkpoint(OrderedDict(), step=manifest["step"], adam_step=manifest["adam_step"],
                      config=manifest["config"], meta=manifest["meta"])
    attrs = dict(_SECTIONS)
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
        getattr(ckpt, attrs[e["section"]])[e["name"]] = arr
    return ckpt


def load_params(store, params) -> None:
    """Copy checkpoint tensors into a ParamStore, naming any missing or mis-shaped tensor."""
    for name, t in store.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tuple(params[name].shape) != tuple(t.shape):
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(params[name].shape)} "
                                  f"!= model shape {tuple(t.shape)}")
    extra = [n for n in params if n not in store]
    if extra:
        raise CheckpointError(f"checkpoint has tensors the model lacks: {extra[:5]}")
    store.load_state(params)


# ---------------------------------------------------------------- CSV exports

def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> List[dict]:
    """Rows of a CSV written by this module, skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_attention(path, records, comments: Sequence[str] = ()) -> None:
    """One row per (scale, slice_z, head, depth_index) with the float32 weight."""
    rows = []
    for r in records:
        for d, w in enumerate(np.asarray(r.weights, dtype=np.float32)):
            rows.append((r.scale, r.slice_z, r.head, d, f"{float(w):.9g}"))
    _write_csv(path, ("scale", "slice_z", "head", "depth_index", "weight"), rows, comments)


def read_attention(path):
    from .model import AttentionRecord

    groups: "OrderedDict[tuple, list]" = OrderedDict()
    for row in read_csv(path):
        key = (int(row["scale"]), int(row["slice_z"]), int(row["head"]))
        groups.setdefault(key, []).append((int(row["depth_index"]), float(row["weight"])))
    out = []
    for (scale, z, head), items in groups.items():
        items.sort()
        out.append(AttentionRecord(scale, z, head, np.array([w for _, w in items], dtype=np.float32)))
    return out


def write_metrics(path, report, comments: Sequence[str] = ()) -> None:
    rows = report.rows()
    _write_csv(path, rows[0], rows[1:], comments)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    _write_csv(path, header, rows, comments)
