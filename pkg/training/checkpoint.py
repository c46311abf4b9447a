"""Checkpoint file: header, named float64 tensors (parameters then Adam moments), CRC-64 trailer.

    8s  magic "RIDDECK1"
    u32 version
    u32 T, L, patch_len, stride, d, d_hidden
    f64 dropout
    u64 step, u64 seed, u64 adam_t
    u32 tensor count
    u8  ablation name length, ablation name (ascii)
    per tensor: u16 name length, name (utf-8), u32 ndim, ndim x u32 dims, f64 data
    u64 CRC-64 of everything above
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from core.errors import KBFormatError, TruncatedFileError
from core.model import PARAM_NAMES, ModelParams
from core.numerics import DualTensor
from schemas.train_config import Ablation, PatchConfig
from training.optimizer import Adam
from utils.binfmt import Reader, check_magic, check_version, split_checksum, with_checksum
from utils.write_guard import atomic_write

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"RIDDECK1"
CKPT_VERSION = 1
_HEADER = "<IIIIIIdQQQI"   # dims, dropout, step, seed, adam_t, tensor count


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    seed: int
    adam_t: int = 0
    adam_m: Optional[dict[str, np.ndarray]] = None
    adam_v: Optional[dict[str, np.ndarray]] = None
    ablation: Ablation = Ablation.full

    def restore_optimizer(self, optimizer: Adam) -> Adam:
        optimizer.load_state(self.adam_t, self.adam_m or {}, self.adam_v or {})
        return optimizer


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = struct.pack("<H", len(raw)) + raw + struct.pack("<I", value.ndim)
    out += struct.pack(f"<{value.ndim}I", *value.shape)
    return out + np.ascontiguousarray(value, dtype="<f8").tobytes()


def encode_checkpoint(params: ModelParams, step: int, seed: int, optimizer: Optional[Adam] = None,
                      ablation: Ablation = Ablation.full) -> bytes:
    tensors = [(name, p.value) for name, p in params.items()]
    adam_t = 0
    if optimizer is not None:
        adam_t = optimizer.t
        tensors += [(f"adam.m.{k}", a) for k, a in optimizer.m.items()]
        tensors += [(f"adam.v.{k}", a) for k, a in optimizer.v.items()]

    tag = Ablation(ablation).value.encode("ascii")
    body = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack(
        _HEADER,
        params.T, params.L, params.patch.patch_len, params.patch.stride, params.d, params.d_hidden,
        params.dropout, step, seed, adam_t, len(tensors),
    )
    body += struct.pack("<B", len(tag)) + tag
    body += b"".join(_pack_tensor(name, value) for name, value in tensors)
    return with_checksum(body)


def save_checkpoint(path: str | Path, params: ModelParams, step: int, seed: int,
                    optimizer: Optional[Adam] = None, ablation: Ablation = Ablation.full) -> Path:
    """Atomic: a reader sees either the previous file or this one, never a mix."""
    path = Path(path)
    atomic_write(path, encode_checkpoint(params, step, seed, optimizer, ablation))
    logger.info(f"[CKPT] Saved step {step} to {path}")
    return path


def _tensor_table(reader: Reader, count: int) -> list[tuple[bytes, tuple[int, ...], bytes]]:
    """Walk the tensor records without interpreting them; short buffers raise TruncatedFileError."""
    table = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len)
        (ndim,) = reader.unpack("<I")
        shape = tuple(reader.unpack(f"<{ndim}I")) if ndim else ()
        table.append((name, shape, reader.take(8 * math.prod(shape))))
    return table


def decode_checkpoint(buf: bytes) -> Checkpoint:
    """Magic, version, layout against the buffer length, then checksum; only then are fields interpreted."""
    what = "checkpoint"
    reader = Reader(buf, what)
    check_magic(reader, CKPT_MAGIC)
    (version,) = reader.unpack("<I")
    check_version(version, CKPT_VERSION, what)
    (T, L, patch_len, stride, d, d_hidden, dropout, step, seed, adam_t, count) = reader.unpack(_HEADER)
    (tag_len,) = reader.unpack("<B")
    tag = reader.take(tag_len)
    table = _tensor_table(reader, count)
    if reader.remaining() < 8:
        raise TruncatedFileError(f"{what} truncated: {reader.remaining()} of 8 checksum bytes present")
    if reader.remaining() > 8:
        raise KBFormatError(f"{what} has {reader.remaining() - 8} unexpected trailing bytes")
    split_checksum(buf, what)

    try:
        ablation = Ablation(tag.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise KBFormatError(f"{what} records unknown ablation {tag!r}")
    tensors = {
        name.decode("utf-8"): np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        for name, shape, data in table
    }
    params = ModelParams(
        T, L, PatchConfig(patch_len=patch_len, stride=stride), d, d_hidden, dropout,
        {name: DualTensor(tensors[name]) for name in PARAM_NAMES if name in tensors},
    )
    m = {k[len("adam.m."):]: a for k, a in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: a for k, a in tensors.items() if k.startswith("adam.v.")}
    return Checkpoint(params, step, seed, adam_t, m or None, v or None, ablation)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = decode_checkpoint(path.read_bytes())
    logger.info(f"[CKPT] Loaded step {ckpt.step} ({ckpt.ablation.value}) from {path} "
                f"({ckpt.params.n_params()} parameters)")
    return ckpt
