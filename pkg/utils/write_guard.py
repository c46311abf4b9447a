import os
import logging
import tempfile
from pathlib import Path

logger = logging.getLogger(__name__)


def atomic_write(path: str | Path, data: bytes | str) -> Path:
    """Write via a temp file in the same directory, fsync, then rename over `path`.
    Readers see either the old file or the complete new one, never a partial write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data

    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except Exception as e:
        logger.error(f"[WriteGuard] Write failed for {path}: {e}")
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    logger.debug(f"[WriteGuard] Wrote {len(payload)} bytes to {path}")
    return path
