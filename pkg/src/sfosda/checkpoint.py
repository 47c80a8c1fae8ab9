"""Checksummed checkpoint files.

Layout: a numpy ``.npz`` archive.  Every named tensor is stored as its own
``.npy`` member (which carries dtype and shape in its header).  The member
``__meta__`` holds UTF-8 JSON with ``format``, ``version``, ``kind``, the
run seed, free-form metadata and ``sha256``: a digest over every tensor's name,
dtype, shape and raw bytes in sorted-name order.  Writes go to a temporary
file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any

import numpy as np

from sfosda.errors import IntegrityError

FORMAT = "sfosda-checkpoint"
VERSION = 1


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode("ascii"))
        h.update(repr(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def save(path, arrays: dict[str, np.ndarray], kind: str, seed: int, meta: dict[str, Any] | None = None) -> None:
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "seed": int(seed),
        "meta": meta or {},
        "sha256": _digest(arrays),
    }
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return (arrays, header); raises IntegrityError on any mismatch."""
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            contents = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from None
    if "__meta__" not in contents:
        raise IntegrityError(f"{path}: missing metadata")
    try:
        header = json.loads(contents.pop("__meta__").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable metadata ({exc})") from None
    if header.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not an sfosda checkpoint")
    if header.get("version") != VERSION:
        raise IntegrityError(f"{path}: checkpoint version {header.get('version')} != supported {VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise IntegrityError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    if _digest(contents) != header.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch")
    return contents, header
