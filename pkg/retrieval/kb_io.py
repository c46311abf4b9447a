"""Binary KB file: header, fixed-size records, CRC-64 trailer, plus a JSON sidecar.

    8s  magic "RIDDEKB1"
    u32 version, u32 T, u32 L, u32 d, u64 n
    32s encoder hash
    n x (u64 id, T x f64 context, L x f64 horizon, d x f64 embedding)
    u64 CRC-64 of everything above
"""

import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from core.errors import EncoderMismatchError, KBFormatError, TruncatedFileError
from retrieval.knowledge_base import KnowledgeBase
from schemas.manifest import KBManifest
from utils.binfmt import Reader, check_magic, check_version, split_checksum, with_checksum
from utils.write_guard import atomic_write

logger = logging.getLogger(__name__)

KB_MAGIC = b"RIDDEKB1"
KB_VERSION = 1
_HEADER = "<IIIIQ32s"


def _record_dtype(T: int, L: int, d: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("context", "<f8", (T,)), ("horizon", "<f8", (L,)), ("embedding", "<f8", (d,))])


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def encode_kb(kb: KnowledgeBase) -> bytes:
    n = len(kb)
    header = KB_MAGIC + struct.pack(_HEADER, KB_VERSION, kb.T, kb.L, kb.d, n, kb.encoder_hash)
    records = np.zeros(n, dtype=_record_dtype(kb.T, kb.L, kb.d))
    records["id"] = kb.ids
    records["context"] = kb.contexts
    records["horizon"] = kb.horizons
    records["embedding"] = kb.embeddings
    return with_checksum(header + records.tobytes())


def save_kb(kb: KnowledgeBase, path: str | Path) -> Path:
    path = Path(path)
    atomic_write(path, encode_kb(kb))
    manifest = KBManifest(
        magic=KB_MAGIC.decode("ascii"), version=KB_VERSION, T=kb.T, L=kb.L, d=kb.d, n=len(kb),
        encoder_hash=kb.encoder_hash.hex(), sources=kb.sources,
    )
    atomic_write(sidecar_path(path), manifest.model_dump_json(indent=2))
    logger.info(f"[KB] Saved {len(kb)} entries to {path}")
    return path


def decode_kb(buf: bytes, expected_encoder_hash: Optional[bytes] = None, threads: int = 1,
              sources=None) -> KnowledgeBase:
    what = "KB file"
    reader = Reader(buf, what)
    check_magic(reader, KB_MAGIC)
    version, T, L, d, n, enc_hash = reader.unpack(_HEADER)
    check_version(version, KB_VERSION, what)

    dtype = _record_dtype(T, L, d)
    expected = reader.pos + n * dtype.itemsize + 8
    if len(buf) < expected:
        raise TruncatedFileError(f"{what} truncated: {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise KBFormatError(f"{what} has {len(buf) - expected} unexpected trailing bytes")
    body = split_checksum(buf, what)

    if expected_encoder_hash is not None and enc_hash != expected_encoder_hash:
        raise EncoderMismatchError(
            f"{what} embeddings come from encoder {enc_hash.hex()[:16]}..., "
            f"expected {expected_encoder_hash.hex()[:16]}..."
        )

    if sources is not None and len(sources) != n:
        logger.warning(f"[KB] Sidecar lists {len(sources)} sources for n={n}; ignoring them")
        sources = None
    if n == 0:
        return KnowledgeBase(T, L, d, np.zeros((0, T)), np.zeros((0, L)), np.zeros((0, d)), enc_hash, threads=threads)

    records = np.frombuffer(body, dtype=dtype, count=n, offset=reader.pos)
    if not np.array_equal(records["id"], np.arange(n, dtype=np.uint64)):
        raise KBFormatError(f"{what} ids are not dense 0..{n - 1}")
    return KnowledgeBase(
        T, L, d,
        contexts=records["context"].reshape(n, T).copy(),
        horizons=records["horizon"].reshape(n, L).copy(),
        embeddings=records["embedding"].reshape(n, d).copy(),
        encoder_hash=enc_hash,
        sources=sources,
        threads=threads,
    )


def load_kb(path: str | Path, expected_encoder_hash: Optional[bytes] = None, threads: int = 1) -> KnowledgeBase:
    """Load and verify a KB file; no partially-read KB is ever returned."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"KB file not found: {path}")
    buf = path.read_bytes()

    sources = None
    side = sidecar_path(path)
    if side.exists():
        manifest = KBManifest.model_validate_json(side.read_text(encoding="utf-8"))
        sources = [tuple(s) if s is not None else None for s in manifest.sources] or None

    kb = decode_kb(buf, expected_encoder_hash, threads, sources)
    logger.info(f"[KB] Loaded {len(kb)} entries from {path} (T={kb.T}, L={kb.L}, d={kb.d})")
    return kb
