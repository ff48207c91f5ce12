"""Checkpoint archive: a versioned header line followed by a torch payload.

::

    HOMOSYNTH-CKPT\\n
    {"format_version": 1, "sha256": "...", "size": N}\\n
    <N bytes of torch.save output>

The whole file is read and verified before anything is handed back, so a
damaged file never partially loads.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import sys
from pathlib import Path

import torch

MAGIC = b"HOMOSYNTH-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CheckpointIoError(CheckpointError, OSError):
    pass


def _canonical(obj):
    # Pickle memoizes by object identity, so equal strings that are distinct
    # objects would serialize differently. Interning makes bytes depend on values only.
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        out = type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
        if hasattr(obj, "_metadata"):
            out._metadata = _canonical(obj._metadata)
        return out
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_checkpoint(path, state: dict) -> Path:
    buf = io.BytesIO()
    torch.save(_canonical(state), buf)
    payload = buf.getvalue()
    header = json.dumps({"format_version": FORMAT_VERSION,
                         "sha256": hashlib.sha256(payload).hexdigest(),
                         "size": len(payload)}, sort_keys=True).encode() + b"\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + header + payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path} is not a checkpoint archive")
    rest = data[len(MAGIC):]
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format {header.get('format_version')}, expected {FORMAT_VERSION}")
    if len(payload) != header.get("size") or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    try:
        return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means a bad payload
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
