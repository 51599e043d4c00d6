"""Binary checkpoint files.

Layout (little-endian)::

    b"LGPK" | u32 version | u32 header length | header JSON
    u32 record count
    per record: u32 name length | name | u32 ndim | u64 dims... | f64 data
    SHA-256 of everything above (32 bytes)

The header carries the model config, vocabulary hashes, the training step and
(optionally) the training config. Optimizer moments are stored as ordinary
records under ``adam.m.`` / ``adam.v.`` name prefixes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState
from .tensor import Tensor

MAGIC = b"LGPK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not match the supplied vocabularies."""


@dataclass
class Checkpoint:
    state: ModelState
    vocab_hashes: dict[str, str]
    step: int = 0
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    train_config: dict | None = None


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, state: ModelState, vocab_hashes: dict[str, str], *,
                    step: int = 0, optimizer=None, train_config: dict | None = None) -> None:
    """Write atomically: the target is replaced only once fully written."""
    header = {
        "config": state.config.to_dict(),
        "vocab_hashes": dict(sorted(vocab_hashes.items())),
        "step": int(step),
        "train_config": train_config,
    }
    records = [(name, p.data) for name, p in state.params.items()]
    if optimizer is not None:
        for slot, moments in (("m", optimizer.m), ("v", optimizer.v)):
            records += [(f"adam.{slot}.{name}", arr) for name, arr in moments.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes,
               struct.pack("<I", len(records))]
    payload += [_pack_record(name, arr) for name, arr in records]

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            body = b"".join(payload)
            fh.write(body + hashlib.sha256(body).digest())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path, vocab_hashes: dict[str, str] | None = None) -> Checkpoint:
    """Read a checkpoint; reject it if ``vocab_hashes`` disagree with the header."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    blob, digest = blob[:-32], blob[-32:]
    if len(blob) < 12 or hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        version, header_len = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        offset = 12
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        (n_records,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arrays = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    stored = header["vocab_hashes"]
    if vocab_hashes is not None:
        for kind, digest in vocab_hashes.items():
            if stored.get(kind) != digest:
                raise CheckpointError(
                    f"{path}: {kind} vocabulary hash {digest} does not match checkpoint {stored.get(kind)}"
                )
    config = ModelConfig.from_dict(header["config"])
    params, optimizer = {}, {"m": {}, "v": {}}
    for name, arr in arrays.items():
        if name.startswith("adam."):
            _, slot, pname = name.split(".", 2)
            optimizer[slot][pname] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return Checkpoint(
        state=ModelState(config, params),
        vocab_hashes=stored,
        step=header["step"],
        optimizer=optimizer if optimizer["m"] else {},
        train_config=header.get("train_config"),
    )
