"""
Flat binary container of named float32 tensors.

Layout (little-endian):
    magic  b"SFCKPT"      6 bytes
    version               u16
    tensor count          u32
    per tensor:
        name length       u16, followed by the UTF-8 name
        rank              u8, followed by `rank` u64 extents
        values            product(extents) float32
"""
import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from .encoder3d import Params
from .errors import CheckpointError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"SFCKPT"
VERSION = 1
_HEADER = struct.Struct("<6sHI")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


def encode_checkpoint(params: Params) -> bytes:
    chunks = [_HEADER.pack(MAGIC, VERSION, len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_RANK.pack(tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        chunks.append(tensor.data.astype("<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes, *, requires_grad: bool = False) -> Params:
    try:
        magic, version, count = _HEADER.unpack_from(payload, 0)
    except struct.error as e:
        raise CheckpointError("checkpoint header is truncated") from e
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    offset = _HEADER.size
    params: Params = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = _RANK.unpack_from(payload, offset)
            offset += _RANK.size
            shape = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            numel = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * numel > len(payload):
                raise CheckpointError(f"tensor {name} is truncated")
            values = np.frombuffer(payload, dtype="<f4", count=numel, offset=offset).reshape(shape)
            offset += 4 * numel
            params[name] = Tensor(values.astype(np.float32), requires_grad=requires_grad, name=name)
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes after the last tensor")
    return params


def save_checkpoint(path: Path, params: Params) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info("Saved %d tensors to %s", len(params), path)


def load_checkpoint(path: Path, *, requires_grad: bool = False) -> Params:
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    logger.info("Loading checkpoint from %s", path)
    return decode_checkpoint(path.read_bytes(), requires_grad=requires_grad)


def params_checksum(params: Params) -> str:
    """SHA-256 over names, shapes and little-endian values, in name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        tensor = params[name]
        digest.update(name.encode("utf-8"))
        digest.update(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        digest.update(tensor.data.astype(tensor.dtype.newbyteorder("<")).tobytes())
    return digest.hexdigest()
