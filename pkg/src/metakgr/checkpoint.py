"""Versioned named-array container used for every on-disk artifact.

Layout: an uncompressed ``.npz`` archive. Each named array is stored under its
own key; the reserved key ``__meta__`` holds a UTF-8 JSON document with

    format   always "metakgr-checkpoint"
    version  integer container version (currently 1)
    kind     "graph" | "policy" | "reward" | ...
    seed     RNG seed the artifact was produced with (or null)
    step     optimizer step counter (or null)
    shapes   name -> list of extents, checked on load
    extra    free-form JSON metadata owned by the writer

Arrays are written with ``allow_pickle=False`` so a load never executes code.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, InvalidArgument

FORMAT = "metakgr-checkpoint"
VERSION = 1
_META_KEY = "__meta__"
# fixed member timestamp keeps archives byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save(path, arrays, *, kind, seed=None, step=None, extra=None):
    arrays = {name: np.ascontiguousarray(value) for name, value in arrays.items()}
    if _META_KEY in arrays:
        raise InvalidArgument(f"array name {_META_KEY!r} is reserved")
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "seed": seed,
        "step": step,
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_member(zf, _META_KEY, np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8))
        for name in sorted(arrays):
            _write_member(zf, name, arrays[name])
    return path


def _write_member(zf, name, array):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, array, allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
    info.external_attr = 0o644 << 16
    zf.writestr(info, buf.getvalue())


def load(path, kind=None):
    """Return ``(arrays, meta)``; raises CheckpointVersionError on a foreign or newer file."""
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (ValueError, OSError, zipfile.BadZipFile) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CheckpointVersionError(f"{path}: not a {FORMAT} container ({exc})") from None
    if not isinstance(data, np.lib.npyio.NpzFile):
        raise CheckpointVersionError(f"{path}: not a {FORMAT} container")
    with data:
        if _META_KEY not in data.files:
            raise CheckpointVersionError(f"{path}: not a {FORMAT} container")
        meta = json.loads(data[_META_KEY].tobytes().decode("utf-8"))
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise CheckpointVersionError(
                f"{path}: unsupported container {meta.get('format')!r} "
                f"version {meta.get('version')!r} (expected {VERSION})")
        if kind is not None and meta.get("kind") != kind:
            raise CheckpointVersionError(
                f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
        arrays = {name: data[name] for name in data.files if name != _META_KEY}
    for name, shape in meta["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise CheckpointVersionError(f"{path}: array {name!r} has corrupted shape metadata")
    return arrays, meta
