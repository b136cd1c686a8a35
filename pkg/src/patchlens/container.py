"""Tensor container used for weight, fixture, and head-checkpoint files.

Layout: 8-byte magic ``VITWGT01``, a little-endian u64 manifest length, the
UTF-8 JSON manifest, zero padding to a 64-byte boundary, then the payload of
concatenated little-endian float32 tensors. Every tensor starts at a 64-byte
aligned offset relative to the payload start. The manifest records, per
tensor: name, dtype (always ``f32``), shape, and byte_offset; file-level
``kind`` and ``meta`` entries carry provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedError

MAGIC = b"VITWGT01"
_ALIGN = 64


def _pad_to(n: int, align: int = _ALIGN) -> int:
    return (n + align - 1) // align * align


def write_container(path, tensors, kind: str, meta: dict | None = None) -> None:
    """Write named float32 tensors; `tensors` is a name -> ndarray mapping."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        start = _pad_to(offset)
        entries.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "byte_offset": start}
        )
        blobs.append((start, arr.tobytes()))
        offset = start + arr.nbytes
    manifest = {"kind": kind, "meta": meta or {}, "tensors": entries}
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header_len = len(MAGIC) + 8 + len(manifest_bytes)
    payload_start = _pad_to(header_len)
    payload = bytearray(offset)
    for start, blob in blobs:
        payload[start : start + len(blob)] = blob
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest_bytes).to_bytes(8, "little"))
        f.write(manifest_bytes)
        f.write(b"\x00" * (payload_start - header_len))
        f.write(bytes(payload))


@dataclass
class Container:
    """Parsed container: manifest plus zero-copy access to tensor payloads."""

    kind: str
    meta: dict
    entries: dict = field(repr=False)
    _payload: bytes = field(repr=False)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.entries:
            raise KeyError(f"container has no tensor {name!r}")
        entry = self.entries[name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + count * 4
        if end > len(self._payload):
            raise TruncatedError(
                f"tensor {name!r} needs bytes [{start}, {end}) but payload has {len(self._payload)}"
            )
        arr = np.frombuffer(self._payload, dtype="<f4", count=count, offset=start)
        return arr.reshape(shape)

    def tensors(self) -> dict:
        return {name: self.tensor(name) for name in self.entries}


def read_container(path) -> Container:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedError("container shorter than its fixed header")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {blob[:8]!r}")
    mlen = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    mstart = len(MAGIC) + 8
    if mstart + mlen > len(blob):
        raise TruncatedError("manifest extends past end of file")
    try:
        manifest = json.loads(blob[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid UTF-8 JSON: {e}") from e
    for key in ("kind", "tensors"):
        if key not in manifest:
            raise FormatError(f"manifest missing required key {key!r}")
    entries = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "f32":
            raise FormatError(f"tensor {entry.get('name')!r} has unsupported dtype")
        if entry["byte_offset"] % _ALIGN != 0:
            raise FormatError(f"tensor {entry['name']!r} offset not {_ALIGN}-byte aligned")
        entries[entry["name"]] = entry
    payload = blob[_pad_to(mstart + mlen) :]
    return Container(
        kind=manifest["kind"],
        meta=manifest.get("meta", {}),
        entries=entries,
        _payload=payload,
    )
