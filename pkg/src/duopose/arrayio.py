"""Self-describing array container files.

Layout: one UTF-8 JSON header line (terminated by ``\\n``) followed by the
raw array payloads, concatenated in header order. Numeric payloads are
little-endian float32 unless an array is declared int32 (mesh faces, tree
indices). The header carries a format tag, a version, user metadata, and
per-array name/shape/dtype entries, so files are readable without any other
context.
"""

import json
import os
from typing import Any, Mapping

import numpy as np

_MAGIC = "duopose-arrays"
_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


def save_arrays(
    path: str | os.PathLike,
    arrays: Mapping[str, np.ndarray],
    meta: dict[str, Any] | None = None,
) -> None:
    """Write arrays and metadata to ``path`` atomically."""
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i4")
            tag = "<i4"
        else:
            arr = arr.astype("<f4")
            tag = "<f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        payloads.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format": _MAGIC,
        "version": _VERSION,
        "meta": meta or {},
        "arrays": entries,
    }
    blob = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8") + b"".join(payloads)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container written by :func:`save_arrays`.

    Returns ``(arrays, meta)``. Raises ValueError on a foreign or corrupt file.
    """
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != _MAGIC:
        raise ValueError(f"{path}: not a {_MAGIC} file")
    if header.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")

    arrays: dict[str, np.ndarray] = {}
    offset = newline + 1
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    return arrays, header.get("meta", {})
