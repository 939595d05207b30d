"""Small file helpers: atomic writes, digests, float formatting."""

import hashlib
import os
from pathlib import Path


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fmt_float(x: float) -> str:
    """Round-trip-exact decimal rendering, stable across runs."""
    return format(float(x), ".17g")
