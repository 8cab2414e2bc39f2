"""Named-tensor container used for pretrained weights and checkpoints.

Layout::

    [8 bytes]  little-endian uint64: manifest length L
    [L bytes]  UTF-8 JSON list of {"name", "shape", "offset"} entries
    [rest]     contiguous little-endian float32 payload

``offset`` is in bytes from the start of the payload. An optional entry named
``meta`` has shape ``[0]`` and carries a JSON object under the ``"json"`` key.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptArchive, TruncatedPayload

META_NAME = "meta"
_HEADER = struct.Struct("<Q")
_LE_F32 = np.dtype("<f4")


@dataclass
class WeightArchive:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict | None = None

    @property
    def manifest(self) -> list[tuple[str, list[int]]]:
        return [(name, list(arr.shape)) for name, arr in self.tensors.items()]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)


def _entries(archive: WeightArchive) -> tuple[list[dict], list[bytes]]:
    entries, chunks, offset = [], [], 0
    for name, arr in archive.tensors.items():
        if name == META_NAME:
            raise ValueError(f"{META_NAME!r} is reserved for the metadata entry")
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": [int(d) for d in np.shape(arr)], "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    if archive.meta is not None:
        entries.append({"name": META_NAME, "shape": [0], "offset": offset, "json": archive.meta})
    return entries, chunks


def write_weight_archive(archive: WeightArchive, path) -> Path:
    path = Path(path)
    entries, chunks = _entries(archive)
    manifest = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


def _parse_manifest(raw: bytes) -> list[dict]:
    try:
        entries = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchive(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise CorruptArchive("manifest must be a JSON list")
    seen = set()
    for entry in entries:
        if not isinstance(entry, dict) or not {"name", "shape", "offset"} <= entry.keys():
            raise CorruptArchive(f"malformed manifest entry: {entry!r}")
        name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        if not isinstance(name, str) or name in seen:
            raise CorruptArchive(f"bad or duplicate tensor name {name!r}")
        seen.add(name)
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise CorruptArchive(f"bad shape for {name!r}: {shape!r}")
        if not isinstance(offset, int) or offset < 0:
            raise CorruptArchive(f"bad offset for {name!r}: {offset!r}")
    return entries


def load_weight_archive(path) -> WeightArchive:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorruptArchive(f"cannot read archive {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise CorruptArchive(f"{path}: file too short for header")
    (mlen,) = _HEADER.unpack_from(data)
    if _HEADER.size + mlen > len(data):
        raise CorruptArchive(f"{path}: manifest length {mlen} exceeds file size")
    entries = _parse_manifest(data[_HEADER.size:_HEADER.size + mlen])
    payload = memoryview(data)[_HEADER.size + mlen:]

    archive = WeightArchive()
    for entry in entries:
        name = entry["name"]
        if name == META_NAME:
            meta = entry.get("json")
            if not isinstance(meta, dict):
                raise CorruptArchive("meta entry carries no JSON object")
            archive.meta = meta
            continue
        count = math.prod(entry["shape"])
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise TruncatedPayload(
                f"{name!r} needs bytes [{entry['offset']}, {end}) but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=_LE_F32, count=count, offset=entry["offset"])
        archive.tensors[name] = arr.astype(np.float32).reshape(entry["shape"])
    return archive
