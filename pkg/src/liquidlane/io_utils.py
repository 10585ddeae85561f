"""Atomic file writes, deterministic array persistence, and manifests."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import os
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


@contextmanager
def atomic_path(final_path):
    """Yield a temporary path that replaces ``final_path`` on success."""
    final_path = Path(final_path)
    tmp = final_path.with_name(final_path.name + f".tmp{os.getpid()}")
    try:
        yield tmp
        os.replace(tmp, final_path)
    finally:
        if tmp.exists():
            tmp.unlink(missing_ok=True)


def write_text_atomic(path, text: str) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write(text)


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(data)


def save_array_gz(path, arr: np.ndarray) -> None:
    """Gzip-compressed .npy with a zeroed timestamp, so identical arrays
    produce identical bytes."""
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    write_bytes_atomic(path, gzip.compress(buf.getvalue(), mtime=0))


def load_array_gz(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.load(io.BytesIO(gzip.decompress(fh.read())))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(root, extra: dict | None = None) -> dict:
    """Checksum every file under ``root`` (except the manifest itself)
    into manifest.json.  The creation timestamp lives in its own field so
    content checksums stay comparable across runs."""
    root = Path(root)
    files = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != MANIFEST_NAME:
            files[path.relative_to(root).as_posix()] = sha256_file(path)
    manifest = {
        "format_version": 1,
        "created": datetime.now(timezone.utc).isoformat(),
        "files": files,
    }
    if extra:
        manifest.update(extra)
    write_text_atomic(root / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(root) -> dict:
    with open(Path(root) / MANIFEST_NAME, "r", encoding="ascii") as fh:
        return json.load(fh)


def verify_manifest(root) -> list[str]:
    """Relative paths whose checksum no longer matches (empty = intact)."""
    root = Path(root)
    manifest = read_manifest(root)
    bad = []
    for rel, expected in manifest["files"].items():
        path = root / rel
        if not path.is_file() or sha256_file(path) != expected:
            bad.append(rel)
    return bad
