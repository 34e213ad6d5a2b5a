"""Directory checkpoints: ``manifest.json`` plus one raw array file per parameter.

Arrays are stored as 64-bit little-endian floats in row-major order
(for the cores, the last index varies fastest), in ``<name>.bin``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .model import PARAM_NAMES, Dims, FactorModel

FORMAT_VERSION = "1"
MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: FactorModel
    users: list[str]
    items: list[str]
    features: list[str]
    opinions: list[str]
    max_rating: int
    config: dict = field(default_factory=dict)


def expected_shapes(m: int, n: int, p: int, q: int, dims: Dims) -> dict[str, tuple[int, ...]]:
    a, b, c, d = dims.a, dims.b, dims.c, dims.d
    return {
        "U": (m, a), "I": (n, b), "F": (p, c), "f_dummy": (c,), "O": (q, d),
        "G1": (a, b, c), "G2": (a, c, d), "G3": (b, c, d),
    }


def manifest_for(ckpt: Checkpoint) -> dict:
    model = ckpt.model
    m, n, p, q = model.shape
    dims = model.dims
    for kind, names, size in (("users", ckpt.users, m), ("items", ckpt.items, n),
                              ("features", ckpt.features, p), ("opinions", ckpt.opinions, q)):
        if len(names) != size:
            raise ShapeError(f"{len(names)} {kind} names for {size} model rows")
    return {
        "version": FORMAT_VERSION,
        "m": m, "n": n, "p": p, "q": q,
        "dims": {"a": dims.a, "b": dims.b, "c": dims.c, "d": dims.d},
        "N": int(ckpt.max_rating),
        "ids": {
            "users": list(ckpt.users), "items": list(ckpt.items),
            "features": list(ckpt.features), "opinions": list(ckpt.opinions),
        },
        "config": ckpt.config,
        "arrays": {name: list(arr.shape) for name, arr in model.arrays().items()},
    }


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write ``ckpt`` to ``directory`` (created if needed) and return its path."""
    directory = Path(directory)
    manifest = manifest_for(ckpt)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in ckpt.model.arrays().items():
            path = directory / f"{name}.bin"
            with open(path, "wb") as fh:
                fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C"))
        path = directory / MANIFEST
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint at {exc.filename or directory}: {exc.strerror}") from exc
    return directory


def _read_manifest(directory: Path) -> dict:
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"missing manifest: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest {path}: {exc}") from exc
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION!r})")
    for key in ("m", "n", "p", "q", "dims", "N", "ids", "arrays"):
        if key not in manifest:
            raise CheckpointError(f"manifest {path} lacks key {key!r}")
    return manifest


def _read_array(directory: Path, name: str, shape) -> np.ndarray:
    path = directory / f"{name}.bin"
    if not path.is_file():
        raise CheckpointError(f"array {name}: missing file {path}")
    raw = path.read_bytes()
    want = int(np.prod(shape)) * _DTYPE.itemsize
    if len(raw) != want:
        kind = "truncated" if len(raw) < want else "oversized"
        raise CheckpointError(f"array {name}: {kind} file {path} ({len(raw)} bytes, expected {want})")
    arr = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
    if not np.isfinite(arr).all():
        raise CheckpointError(f"array {name}: non-finite value")
    if (arr < 0).any():
        raise CheckpointError(f"array {name}: negative value violates the non-negativity invariant")
    return arr


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointError(f"not a checkpoint directory: {directory}")
    manifest = _read_manifest(directory)
    try:
        dims = Dims(**manifest["dims"])
        expected = expected_shapes(manifest["m"], manifest["n"], manifest["p"], manifest["q"], dims)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad manifest sizes: {exc}") from exc
    recorded = manifest["arrays"]
    arrays = {}
    for name in PARAM_NAMES:
        shape = tuple(recorded.get(name, ()))
        if shape != expected[name]:
            raise CheckpointError(
                f"array {name}: manifest shape {list(shape)} does not match expected {list(expected[name])}"
            )
        arrays[name] = _read_array(directory, name, shape)
    ids = manifest["ids"]
    for kind, size in (("users", "m"), ("items", "n"), ("features", "p"), ("opinions", "q")):
        if len(ids.get(kind, [])) != manifest[size]:
            raise CheckpointError(f"manifest has {len(ids.get(kind, []))} {kind} ids, expected {manifest[size]}")
    return Checkpoint(
        FactorModel(**arrays), list(ids["users"]), list(ids["items"]),
        list(ids["features"]), list(ids["opinions"]), int(manifest["N"]),
        dict(manifest.get("config", {})),
    )


def checkpoint_files(directory) -> list[str]:
    """Names of the files a checkpoint consists of, manifest first."""
    return [MANIFEST] + [f"{name}.bin" for name in PARAM_NAMES]


def is_checkpoint(directory) -> bool:
    return os.path.isfile(os.path.join(directory, MANIFEST))
