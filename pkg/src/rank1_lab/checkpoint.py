"""Named-tensor checkpoints in the safetensors container layout, and deltas.

File layout: an 8-byte little-endian unsigned header length N, N bytes of
JSON (tensor name -> {dtype, shape, data_offsets} plus a ``__metadata__``
string map), then the contiguous little-endian payload. Only F32 and F64
payloads are supported.
"""
from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CheckpointIOError,
    DuplicateName,
    EmptyIntersection,
    MalformedHeader,
    NonFiniteInput,
    TruncatedPayload,
)

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}

LINEAR_PROJECTIONS = (
    "self_attn.q_proj",
    "self_attn.k_proj",
    "self_attn.v_proj",
    "self_attn.o_proj",
    "mlp.gate_proj",
    "mlp.up_proj",
    "mlp.down_proj",
)
DEFAULT_LINEAR_PATTERNS = tuple(
    pat for proj in LINEAR_PROJECTIONS for pat in (f"*{proj}", f"*{proj}.weight")
)
EMBEDDING_PATTERNS = ("*embed_tokens", "*embed_tokens.weight", "*lm_head", "*lm_head.weight")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NonFiniteInput(f"tensor {name!r} contains NaN or Inf")

    def names(self) -> list[str]:
        return sorted(self.tensors)


@dataclass
class DeltaSet:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    skipped_names: list[str] = field(default_factory=list)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate tensor name {key!r} in header")
        out[key] = value
    return out


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    header: dict = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        if name == "__metadata__":
            raise DuplicateName("'__metadata__' is reserved")
        arr = np.asarray(ckpt.tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    if ckpt.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(ckpt.metadata.items())}
    text = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    text += b" " * (-len(text) % 8)  # payload starts 8-byte aligned
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(text)))
            fh.write(text)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write {path}: {exc}") from exc


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read {path}: {exc}") from exc
    if len(data) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise MalformedHeader(f"header length {n} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    meta = header.pop("__metadata__", {}) or {}
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise MalformedHeader("__metadata__ must map strings to strings")

    payload = memoryview(data)[8 + n:]
    spans = []
    for name, info in header.items():
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = tuple(int(d) for d in info["shape"])
            start, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeader(f"bad header entry for {name!r}: {exc}") from exc
        if any(d < 0 for d in shape) or start < 0 or end < start:
            raise MalformedHeader(f"bad shape/offsets for {name!r}")
        if end - start != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise MalformedHeader(f"byte range of {name!r} does not match its shape")
        spans.append((start, end, name, dtype, shape))

    spans.sort()
    cursor = 0
    for start, end, name, _, _ in spans:
        if start != cursor:
            kind = "overlapping" if start < cursor else "non-contiguous"
            raise MalformedHeader(f"{kind} payload range for {name!r}")
        cursor = end
    if cursor > len(payload):
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header needs {cursor}")

    tensors = {}
    for start, end, name, dtype, shape in spans:
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(tensors=tensors, metadata=dict(meta))


def delta(base: Checkpoint, tuned: Checkpoint) -> DeltaSet:
    """Entrywise ``tuned - base`` in float64 for every shared, equal-shape name."""
    shared = set(base.tensors) & set(tuned.tensors)
    if not shared:
        raise EmptyIntersection("checkpoints share no tensor names")
    entries = {}
    skipped = sorted(set(base.tensors) ^ set(tuned.tensors))
    for name in sorted(shared):
        b, t = base.tensors[name], tuned.tensors[name]
        if b.shape != t.shape:
            skipped.append(name)
            continue
        entries[name] = t.astype(np.float64) - b.astype(np.float64)
    return DeltaSet(entries=entries, skipped_names=sorted(skipped))


def matches(name: str, patterns: Iterable[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, pat) for pat in patterns)


def default_patterns(include_embeddings: bool = False) -> tuple[str, ...]:
    if include_embeddings:
        return DEFAULT_LINEAR_PATTERNS + EMBEDDING_PATTERNS
    return DEFAULT_LINEAR_PATTERNS


def select_linear(ds: DeltaSet, patterns: Iterable[str] | None = None) -> DeltaSet:
    """Keep the 2-D entries whose names match any glob in ``patterns``."""
    patterns = default_patterns() if patterns is None else tuple(patterns)
    kept = {
        name: m for name, m in ds.entries.items() if m.ndim == 2 and matches(name, patterns)
    }
    return DeltaSet(entries=kept, skipped_names=list(ds.skipped_names))


def select_names(tensors: Mapping[str, np.ndarray], patterns: Iterable[str]) -> list[str]:
    patterns = tuple(patterns)
    return sorted(n for n, t in tensors.items() if np.ndim(t) == 2 and matches(n, patterns))
