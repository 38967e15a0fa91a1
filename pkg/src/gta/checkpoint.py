"""Self-describing checkpoint container: a JSON header followed by flat
little-endian float32 parameter payloads, integrity-checked by a content
hash of the payload."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GTACKPT1"


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    """Payload hash mismatch or truncated file."""


def write_checkpoint(
    path: str | Path,
    kind: str,
    header: dict,
    arrays: list[tuple[str, np.ndarray]],
) -> None:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    full_header = {
        "format_version": 1,
        "kind": kind,
        **header,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(full_header, indent=None, sort_keys=False).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def read_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    header_len = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])[0]
    start = len(MAGIC) + 8
    if len(raw) < start + header_len:
        raise IntegrityError(f"{path} is truncated inside the header")
    header = json.loads(raw[start : start + header_len].decode())
    if header.get("kind") != kind:
        raise CheckpointError(
            f"checkpoint kind is {header.get('kind')!r}, expected {kind!r}"
        )
    payload = raw[start + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload hash mismatch (corrupt or truncated)")
    arrays = {}
    offset = 0
    for spec in header["params"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise IntegrityError(f"{path}: payload ends inside parameter {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).reshape(spec["shape"]).copy()
        offset += nbytes
    return header, arrays
