import os
import tempfile
import logging

logger = logging.getLogger("g2c-storage")


def atomic_write_bytes(path, data: bytes):
    """Writes to a temp file in the target directory, then renames over path"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.debug(f"Wrote {len(data)} bytes to {path}")


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
