"""Single-file tensor container: ``[u64 header_len][JSON header][raw payload]``.

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
plus an optional ``"__metadata__"`` string map, so files written here can be
opened by the standard single-file checkpoint tooling and vice versa.
Entries are laid out contiguously in lexicographic name order, which makes
writing deterministic: identical inputs produce identical bytes.

Loaded stores are immutable; reading one from multiple threads is safe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np


class ContainerError(ValueError):
    """Malformed container bytes or invalid tensors passed to the writer."""


# Container dtype tag -> numpy dtype (little-endian on disk).
_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I8": np.dtype("|i1"),
    "U8": np.dtype("|u1"),
}
_DTYPE_TAGS = {v: k for k, v in _DTYPES.items()}

_HEADER_ALIGN = 8


def dtype_tag(dtype: np.dtype) -> str:
    """Container tag for a numpy dtype, e.g. float32 -> "F32"."""
    key = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _DTYPE_TAGS[key]
    except KeyError:
        raise ContainerError(f"unsupported dtype {dtype!r}; supported: f32, f16, i8, u8") from None


@dataclass(frozen=True)
class TensorEntry:
    """Header record for one tensor: where its bytes live in the payload."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class TensorStore:
    """Parsed container: entries, string metadata, and the raw payload."""

    entries: dict[str, TensorEntry]
    metadata: dict[str, str] = field(default_factory=dict)
    payload: bytes = b""

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return sorted(self.entries)

    def get(self, name: str) -> np.ndarray:
        """Decode one tensor from the payload (returns a read-only view)."""
        try:
            entry = self.entries[name]
        except KeyError:
            raise ContainerError(f"no tensor named {name!r} in store") from None
        begin, end = entry.data_offsets
        arr = np.frombuffer(self.payload, dtype=_DTYPES[entry.dtype], offset=begin,
                            count=(end - begin) // _DTYPES[entry.dtype].itemsize)
        return arr.reshape(entry.shape)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self.get(name)


def write_store(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize tensors (lexicographic name order) into container bytes.

    Tensors must already use a supported dtype; callers cast explicitly so
    no silent precision change happens here.
    """
    header: dict[str, object] = {}
    if metadata:
        bad = [k for k, v in metadata.items() if not isinstance(v, str)]
        if bad:
            raise ContainerError(f"metadata values must be strings (keys: {bad})")
        header["__metadata__"] = dict(metadata)

    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if name == "__metadata__":
            raise ContainerError("'__metadata__' is reserved and cannot name a tensor")
        arr = np.ascontiguousarray(tensors[name])
        tag = dtype_tag(arr.dtype)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        if len(raw) != arr.size * _DTYPES[tag].itemsize:
            raise ContainerError(f"tensor {name!r}: shape {arr.shape} does not match its data length")
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = -(8 + len(header_bytes)) % _HEADER_ALIGN
    header_bytes += b" " * pad
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def read_store(data: bytes) -> TensorStore:
    """Parse container bytes, validating layout invariants.

    Rejects truncated files, non-JSON headers, out-of-bounds or overlapping
    offsets, and gaps: entries must tile the payload contiguously from 0.
    """
    if len(data) < 8:
        raise ContainerError("truncated file: missing 8-byte header length")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise ContainerError(f"truncated file: header length {header_len} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("header must be a JSON object")

    payload = data[8 + header_len :]

    raw_meta = header.pop("__metadata__", {})
    if not isinstance(raw_meta, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in raw_meta.items()
    ):
        raise ContainerError("__metadata__ must be a string-to-string map")

    entries: dict[str, TensorEntry] = {}
    for name, spec in header.items():
        if not isinstance(spec, dict):
            raise ContainerError(f"entry {name!r}: expected an object")
        try:
            tag = spec["dtype"]
            shape = spec["shape"]
            begin, end = spec["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"entry {name!r}: missing or malformed fields") from exc
        if tag not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unsupported dtype {tag!r}")
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape):
            raise ContainerError(f"entry {name!r}: shape must be a list of non-negative ints")
        if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
            raise ContainerError(f"entry {name!r}: invalid data_offsets [{begin}, {end}]")
        if end > len(payload):
            raise ContainerError(
                f"entry {name!r}: offsets out of bounds (end {end} > payload size {len(payload)})"
            )
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[tag].itemsize
        if end - begin != expected:
            raise ContainerError(
                f"entry {name!r}: byte span {end - begin} does not match shape {shape} x {tag}"
            )
        entries[name] = TensorEntry(name, tag, tuple(shape), (begin, end))

    cursor = 0
    for entry in sorted(entries.values(), key=lambda e: e.data_offsets):
        begin, end = entry.data_offsets
        if begin < cursor:
            raise ContainerError(f"entry {entry.name!r}: overlaps the previous entry")
        if begin > cursor:
            raise ContainerError(f"entry {entry.name!r}: gap before offset {begin}")
        cursor = end
    if cursor != len(payload):
        raise ContainerError(f"payload has {len(payload) - cursor} trailing bytes not covered by any entry")

    return TensorStore(entries=entries, metadata=dict(raw_meta), payload=payload)


def save_store(path: str | Path, tensors: Mapping[str, np.ndarray],
               metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(write_store(tensors, metadata))


def load_store(path: str | Path) -> TensorStore:
    return read_store(Path(path).read_bytes())
