"""Binary model container.

Layout (all integers little-endian)::

    b"DSBL" | u16 version | sections... | u64 checksum

Each section is ``4-byte tag | u64 length | payload``.  ``CONF`` holds the
canonical JSON header (model config, frozen flag, parameter names/shapes in
traversal order); ``PARM`` the float32 parameter blobs in that order; the
optional ``ENSM`` section the fitted classifier ensemble as canonical JSON.
The checksum is a 64-bit BLAKE2b digest of every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, build_model

MAGIC = b"DSBL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_sections(sections: list) -> bytes:
    out = bytearray(MAGIC + struct.pack("<H", VERSION))
    for tag, payload in sections:
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes: {tag!r}")
        out += tag + struct.pack("<Q", len(payload)) + payload
    out += _digest(bytes(out))
    return bytes(out)


def decode_sections(data: bytes) -> dict:
    if len(data) < 6 + 8:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}: not a DSBL container")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {VERSION})")
    body, checksum = data[:-8], data[-8:]
    sections, pos = {}, 6
    while pos < len(body):
        if pos + 12 > len(body):
            raise CheckpointError("truncated section header")
        tag = body[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", body, pos + 4)
        pos += 12
        if pos + length > len(body):
            raise CheckpointError(f"truncated section {tag!r}")
        sections[tag] = body[pos:pos + length]
        pos += length
    if _digest(body) != checksum:
        raise CheckpointError("checksum mismatch: file is corrupt")
    return sections


def model_sections(model: Model) -> list:
    params = model.params
    header = {
        "model": json.loads(model.config.to_json()),
        "aux_frozen": model.aux_frozen,
        "params": [[name, list(t.shape)] for name, t in params.items()],
    }
    blob = b"".join(t.data.astype("<f4").tobytes() for t in params.values())
    return [(b"CONF", _canonical(header)), (b"PARM", blob)]


def save_checkpoint(model: Model, path, ensemble: Optional[dict] = None):
    sections = model_sections(model)
    if ensemble is not None:
        sections.append((b"ENSM", _canonical(ensemble)))
    Path(path).write_bytes(encode_sections(sections))


def read_container(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from e
    return decode_sections(data)


def model_from_sections(sections: dict) -> Model:
    if b"CONF" not in sections or b"PARM" not in sections:
        raise CheckpointError("container lacks model sections")
    header = json.loads(sections[b"CONF"].decode("utf-8"))
    model = build_model(ModelConfig.from_dict(header["model"]))
    params = model.params
    declared = [(n, tuple(s)) for n, s in header["params"]]
    actual = [(n, t.shape) for n, t in params.items()]
    if declared != actual:
        raise CheckpointError("parameter layout does not match the declared config")
    blob = sections[b"PARM"]
    expected = 4 * sum(t.size for t in params.values())
    if len(blob) != expected:
        raise CheckpointError(f"parameter payload is {len(blob)} bytes, expected {expected}")
    pos = 0
    for t in params.values():
        n = t.size * 4
        t.data = np.frombuffer(blob, dtype="<f4", count=t.size, offset=pos).astype(np.float32).reshape(t.shape)
        pos += n
    if header["aux_frozen"]:
        model.freeze_aux()
    return model


def load_checkpoint(path) -> Model:
    return model_from_sections(read_container(path))


def load_ensemble_payload(path) -> Optional[dict]:
    sections = read_container(path)
    if b"ENSM" not in sections:
        return None
    return json.loads(sections[b"ENSM"].decode("utf-8"))
