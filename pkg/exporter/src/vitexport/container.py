"""Independent writer/reader of the tensor interchange container.

Deliberately shares no code with the consumer package: the file format is the
interface, and an independent implementation on the producing side means a
format bug cannot cancel itself out across the round trip.

Layout: magic ``VITWGT01`` (8 bytes), little-endian u64 manifest length, UTF-8
JSON manifest, zero padding to a 64-byte boundary, then concatenated
little-endian float32 tensors, each starting at a 64-byte-aligned offset.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"VITWGT01"
ALIGN = 64


def _pad(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_tensors(path, tensors: dict, kind: str, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        start = _pad(offset)
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                        "byte_offset": start})
        blobs.append((start, arr.tobytes()))
        offset = start + arr.nbytes
    manifest = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    header = len(MAGIC) + 8 + len(manifest)
    payload = bytearray(offset)
    for start, blob in blobs:
        payload[start : start + len(blob)] = blob
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        f.write(b"\x00" * (_pad(header) - header))
        f.write(bytes(payload))


def read_tensors(path) -> tuple[str, dict, dict]:
    """Returns (kind, meta, {name: float32 array})."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"bad magic in {path}: {blob[:8]!r}")
    mlen = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    mstart = len(MAGIC) + 8
    manifest = json.loads(blob[mstart : mstart + mlen].decode("utf-8"))
    payload = blob[_pad(mstart + mlen) :]
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        if start + count * 4 > len(payload):
            raise ValueError(f"tensor {entry['name']!r} truncated")
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start
        ).reshape(shape)
    return manifest["kind"], manifest.get("meta", {}), tensors
