"""Checkpoint and report serialization.

Checkpoints are a binary blob of named numeric arrays (``.bin``, written in
NPZ layout) plus a JSON manifest next to it (same stem, ``.json``).  The
manifest is the source of truth for how the arrays are re-attached.  All
JSON written here is canonical (sorted keys, fixed separators) so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _npz_bytes(arrays: Mapping[str, np.ndarray]) -> bytes:
    # ZIP_STORED with zeroed timestamps keeps the blob byte-reproducible.
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, arr_buf.getvalue())
    return buf.getvalue()


def save_blob(path: str | Path, arrays: Mapping[str, np.ndarray], manifest: dict) -> str:
    """Write ``<path>`` (named-array blob) and ``<path stem>.json``; returns digest."""
    path = Path(path)
    blob = _npz_bytes(arrays)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = dict(manifest)
    manifest["blob_digest"] = digest
    write_json(path.with_suffix(".json"), manifest)
    return digest


def load_blob(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_json(path.with_suffix(".json"))
    with np.load(io.BytesIO(path.read_bytes()), allow_pickle=False) as npz:
        arrays = {name: npz[name] for name in npz.files}
    return arrays, manifest


def blob_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
