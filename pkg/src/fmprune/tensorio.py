"""NPY v1.0 tensor files and the activation manifest.

The on-disk tensor format is NPY version 1.0, little-endian, C-contiguous,
restricted to float32/float64. The header is parsed and emitted by hand so
malformed files fail with precise errors instead of whatever a generic
loader raises.
"""

from __future__ import annotations

import ast
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoFailure,
    MalformedHeader,
    MissingFile,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDtype,
)

MAGIC = b"\x93NUMPY"
_DESCRS = {"<f4": np.float32, "<f8": np.float64}
_HEADER_ALIGN = 64


@dataclass(frozen=True)
class TensorFile:
    """An immutable dense float tensor with an explicit shape."""

    data: np.ndarray

    def __post_init__(self):
        a = self.data
        if a.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise UnsupportedDtype(f"unsupported dtype {a.dtype}")
        if a.ndim == 0 or any(d < 1 for d in a.shape):
            raise ShapeMismatch(f"invalid tensor shape {a.shape}")
        a.setflags(write=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __eq__(self, other):
        if not isinstance(other, TensorFile):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class ActivationSet:
    """Feature maps for one layer: T sample stacks of shape (N, H, W)."""

    layer_id: str
    samples: np.ndarray  # (T, N, H, W)

    def __post_init__(self):
        s = self.samples
        if s.ndim != 4:
            raise ShapeMismatch(
                f"{self.layer_id}: activations must be (T, N, H, W), got {s.shape}"
            )
        if any(d < 1 for d in s.shape):
            raise ShapeMismatch(f"{self.layer_id}: degenerate shape {s.shape}")
        s.setflags(write=False)

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    layer_id: str
    tensor_path: Path
    samples: int


@dataclass(frozen=True)
class Manifest:
    model_graph_path: Path
    entries: list = field(default_factory=list)
    format_version: str = "1"


def _parse_header_dict(text: str) -> dict:
    try:
        d = ast.literal_eval(text)
    except (ValueError, SyntaxError) as e:
        raise MalformedHeader(f"unparseable header: {e}") from e
    if not isinstance(d, dict):
        raise MalformedHeader("header is not a dict")
    return d


def read_tensor(path) -> TensorFile:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such tensor file: {path}")
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:6] != MAGIC:
        raise MalformedHeader(f"{path}: bad magic")
    if raw[6:8] != b"\x01\x00":
        raise MalformedHeader(f"{path}: unsupported NPY version {raw[6]}.{raw[7]}")
    hlen = int.from_bytes(raw[8:10], "little")
    if len(raw) < 10 + hlen:
        raise MalformedHeader(f"{path}: header length {hlen} exceeds file size")
    header = _parse_header_dict(raw[10 : 10 + hlen].decode("latin1"))
    for key in ("descr", "fortran_order", "shape"):
        if key not in header:
            raise MalformedHeader(f"{path}: header missing {key!r}")
    descr = header["descr"]
    if descr not in _DESCRS:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} not supported")
    if header["fortran_order"]:
        raise MalformedHeader(f"{path}: fortran_order not supported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or len(shape) == 0 or any(
        not isinstance(d, int) or d < 1 for d in shape
    ):
        raise MalformedHeader(f"{path}: invalid shape {shape!r}")
    dtype = np.dtype(_DESCRS[descr]).newbyteorder("<")
    count = int(np.prod(shape))
    body = raw[10 + hlen :]
    if len(body) < count * dtype.itemsize:
        raise TruncatedData(
            f"{path}: expected {count * dtype.itemsize} data bytes, got {len(body)}"
        )
    data = np.frombuffer(body[: count * dtype.itemsize], dtype=dtype).reshape(shape)
    return TensorFile(data=data.astype(dtype.newbyteorder("="), copy=True))


def _build_header(dtype: np.dtype, shape: tuple) -> bytes:
    descr = "<f4" if dtype == np.dtype(np.float32) else "<f8"
    shape_repr = "(%s)" % (
        "%d," % shape[0] if len(shape) == 1 else ", ".join(str(d) for d in shape)
    )
    body = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        shape_repr,
    )
    # magic(6) + version(2) + hlen(2) + header text padded to a 64-byte multiple
    total = 10 + len(body) + 1
    pad = (-total) % _HEADER_ALIGN
    text = body + " " * pad + "\n"
    return MAGIC + b"\x01\x00" + len(text).to_bytes(2, "little") + text.encode("latin1")


def write_tensor(path, tensor: TensorFile) -> None:
    path = Path(path)
    header = _build_header(tensor.dtype, tensor.shape)
    buf = np.ascontiguousarray(tensor.data).astype(
        tensor.data.dtype.newbyteorder("<"), copy=False
    )
    try:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(buf.tobytes())
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"failed to write {path}: {e}") from e


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedHeader(f"{path}: invalid JSON: {e}") from e
    base = path.parent
    entries = []
    seen = set()
    for e in doc.get("entries", []):
        lid = e["layer_id"]
        if lid in seen:
            raise ShapeMismatch(f"duplicate manifest layer_id {lid!r}")
        seen.add(lid)
        entries.append(ManifestEntry(lid, base / e["tensor"], int(e["samples"])))
    counts = {e.samples for e in entries}
    if len(counts) > 1:
        raise ShapeMismatch(f"inconsistent sample counts in manifest: {sorted(counts)}")
    return Manifest(
        model_graph_path=base / doc["model_graph"],
        entries=entries,
        format_version=str(doc.get("format_version", "1")),
    )


def save_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    doc = {
        "format_version": manifest.format_version,
        "model_graph": os.path.relpath(manifest.model_graph_path, path.parent),
        "entries": [
            {
                "layer_id": e.layer_id,
                "tensor": os.path.relpath(e.tensor_path, path.parent),
                "samples": e.samples,
            }
            for e in manifest.entries
        ],
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, path)


def load_activations(manifest: Manifest, graph=None) -> dict:
    """Load every manifest entry as an ActivationSet keyed by layer id.

    When a graph is given, every layer_id must resolve to one of its layers.
    """
    if graph is not None:
        known = {l.layer_id for l in graph.layers}
        for e in manifest.entries:
            if e.layer_id not in known:
                raise ShapeMismatch(
                    f"manifest layer {e.layer_id!r} not present in model graph"
                )
    out = {}
    sample_count = None
    for e in manifest.entries:
        t = read_tensor(e.tensor_path)
        if t.data.ndim != 4:
            raise ShapeMismatch(
                f"{e.layer_id}: activation tensor must be rank 4, got {t.shape}"
            )
        if t.shape[0] != e.samples:
            raise ShapeMismatch(
                f"{e.layer_id}: manifest says {e.samples} samples, file has {t.shape[0]}"
            )
        if sample_count is None:
            sample_count = t.shape[0]
        elif t.shape[0] != sample_count:
            raise ShapeMismatch(
                f"{e.layer_id}: sample count {t.shape[0]} != {sample_count}"
            )
        out[e.layer_id] = ActivationSet(layer_id=e.layer_id, samples=t.data)
    return out
