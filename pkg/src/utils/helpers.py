"""
Helper utility functions: file hashing, directories and atomic writes.
"""
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Union


def file_hash(path: Union[str, Path]) -> str:
    """Hash a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def directory_hash(path: Union[str, Path], exclude: Iterable[str] = ()) -> str:
    """
    Hash every file below a directory, in sorted relative-path order.

    Args:
        path: Directory to hash
        exclude: File names to skip (e.g. run manifests that carry wall-clock time)

    Returns:
        Hexadecimal hash string covering paths and contents
    """
    root = Path(path)
    skipped = set(exclude)
    digest = hashlib.sha256()
    for file_path in sorted(p for p in root.rglob("*") if p.is_file()):
        if file_path.name in skipped:
            continue
        digest.update(file_path.relative_to(root).as_posix().encode())
        digest.update(file_hash(file_path).encode())
    return digest.hexdigest()


def ensure_dir(path: Union[str, Path]) -> Path:
    """
    Ensure directory exists, create if it doesn't.

    Args:
        path: Directory path

    Returns:
        Path object
    """
    dir_path = Path(path)
    dir_path.mkdir(parents=True, exist_ok=True)
    return dir_path


def atomic_write_json(path: Union[str, Path], payload: Any) -> Path:
    """
    Write JSON so that readers never observe a half-written file.

    Args:
        path: Destination file
        payload: JSON-serialisable object

    Returns:
        Path of the written file
    """
    target = Path(path)
    ensure_dir(target.parent)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target
