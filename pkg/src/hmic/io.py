"""On-disk formats: RGB images, the slide manifest and binary model checkpoints.

Checkpoint layout::

    b"HMIC1" | uint16 version | uint32 header length | UTF-8 JSON header | tensor data

All integers are little-endian. The header carries the network description, free-form
metadata and a tensor table; tensors follow as little-endian float32 in layer order,
then optional optimizer state tensors.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .nn.layers import NetworkSpec, check_params
from .optim import Optimizer, optimizer_from_state

MAGIC = b"HMIC1"
FORMAT_VERSION = 1
MANIFEST_HEADER = ("slide_id", "path", "parent_label", "child_label")
_PREFIX = struct.Struct("<HI")


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image) -> None:
    """Lossless write; the container follows the suffix (``.png`` or ``.ppm``)."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected a (H, W, 3) uint8 image")
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ValueError(f"unsupported image container {path.suffix!r}; use .png or .ppm")
    Image.fromarray(img, "RGB").save(path)


@dataclass(frozen=True)
class ManifestRecord:
    slide_id: str
    image_path: str
    parent_label: str
    child_label: str | None = None


def load_manifest(path, routed_parent: str = "CD") -> list:
    """Parse and validate a manifest CSV. Paths are kept as written."""
    records, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"line 1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            slide_id, img_path, parent, child = (v.strip() for v in row)
            if not slide_id or not img_path or not parent:
                raise ManifestError(f"line {lineno}: slide_id, path and parent_label are required")
            if slide_id in seen:
                raise ManifestError(f"line {lineno}: duplicate slide_id {slide_id!r}")
            child = child or None
            if (child is not None) != (parent == routed_parent):
                raise ManifestError(f"line {lineno}: child label must be present iff parent is {routed_parent}")
            seen.add(slide_id)
            records.append(ManifestRecord(slide_id, img_path, parent, child))
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.slide_id, r.image_path, r.parent_label, r.child_label or ""])


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    metadata: dict = field(default_factory=dict)
    optimizer: Optimizer | None = None


def _tensor_bytes(arr) -> bytes:
    a = np.asarray(arr)
    if a.dtype != np.float32:
        raise ValueError(f"checkpoint tensors must be float32, got {a.dtype}")
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(path, spec: NetworkSpec, params: dict, metadata: dict | None = None,
                    optimizer: Optimizer | None = None) -> None:
    check_params(spec, params)
    table, blobs = [], []
    for key, arr in params.items():
        table.append({"name": key, "shape": list(arr.shape)})
        blobs.append(_tensor_bytes(arr))
    opt_header = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_tensors = []
        for aux_name, store in state["aux"].items():
            for key, arr in store.items():
                opt_tensors.append({"aux": aux_name, "name": key, "shape": list(arr.shape)})
                blobs.append(_tensor_bytes(arr))
        opt_header = {"kind": state["kind"], "hyperparams": state["hyperparams"], "t": state["t"],
                      "tensors": opt_tensors}
    header = {"spec": spec.to_dict(), "metadata": metadata or {}, "tensors": table, "optimizer": opt_header}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + _PREFIX.size:
        raise FormatError(f"{path}: truncated header")
    version, head_len = _PREFIX.unpack_from(data, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version} is not supported "
                          f"(this build reads version {FORMAT_VERSION})")
    pos += _PREFIX.size
    if len(data) < pos + head_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    pos += head_len

    def take(shape):
        nonlocal pos
        n = 4 * int(np.prod(shape, dtype=np.int64))
        if len(data) < pos + n:
            raise FormatError(f"{path}: truncated tensor data")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += n
        return arr

    spec = NetworkSpec.from_dict(header["spec"])
    params = {t["name"]: take(tuple(t["shape"])) for t in header["tensors"]}
    optimizer = None
    opt = header.get("optimizer")
    if opt is not None:
        aux = {}
        for t in opt["tensors"]:
            aux.setdefault(t["aux"], {})[t["name"]] = take(tuple(t["shape"]))
        optimizer = optimizer_from_state({"kind": opt["kind"], "hyperparams": opt["hyperparams"],
                                          "t": opt["t"], "aux": aux})
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        check_params(spec, params)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return Checkpoint(spec, params, header.get("metadata", {}), optimizer)
