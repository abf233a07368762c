"""HCAM checkpoint format.

Layout (little-endian)::

    b"HCAM" | version u32 | config digest (32 bytes, SHA-256) | count u32
    then per tensor: name length u32 | UTF-8 name | rank u8 | dims u32[rank] | f64 data
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"HCAM"
VERSION = 1
DIGEST_BYTES = 32


def encode_checkpoint(tensors, digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"config digest must be {DIGEST_BYTES} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        # asarray, not ascontiguousarray: the latter turns 0-d tensors into 1-d
        arr = np.asarray(
            value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value,
            dtype="<f8", order="C",
        )
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes):
    """Returns ``(digest, OrderedDict[name, float64 ndarray])``."""
    if data[:4] != MAGIC:
        raise DataError("not an HCAM checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported HCAM version {version}")
    pos = 8
    digest = data[pos : pos + DIGEST_BYTES]
    pos += DIGEST_BYTES
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        tensors[name] = arr.astype(np.float64)
    if pos != len(data):
        raise DataError(f"{len(data) - pos} trailing bytes after the last tensor")
    return digest, tensors


def save_checkpoint(path, model: torch.nn.Module, digest: bytes):
    Path(path).write_bytes(encode_checkpoint(model.state_dict(), digest))


def load_checkpoint(path, model: torch.nn.Module, expected_digest: bytes | None = None,
                    force: bool = False) -> bytes:
    digest, tensors = decode_checkpoint(Path(path).read_bytes())
    if expected_digest is not None and digest != expected_digest and not force:
        raise DataError(
            f"{path}: checkpoint was written for a different configuration "
            f"(digest {digest.hex()[:12]} vs {expected_digest.hex()[:12]}); use --force to override"
        )
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise DataError(f"{path}: tensor names differ (missing {sorted(missing)}, extra {sorted(extra)})")
    with torch.no_grad():
        for name, value in state.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(value.shape):
                raise DataError(f"{path}: {name} has shape {arr.shape}, expected {tuple(value.shape)}")
            value.copy_(torch.from_numpy(arr))
    return digest
