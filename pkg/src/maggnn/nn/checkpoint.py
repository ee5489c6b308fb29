"""Checkpoints: a JSON manifest plus a flat little-endian float64 blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ShapeError
from .params import ParamStore

BLOB_DTYPE = "<f8"


def save_checkpoint(path: str | Path, stores: dict[str, ParamStore], meta: dict | None = None) -> None:
    """Write ``<path>.json`` and ``<path>.bin``.

    The manifest lists every tensor with its store, shape and element offset
    into the blob.
    """
    path = Path(path)
    entries = []
    chunks = []
    off = 0
    for store_name, store in stores.items():
        for d in store.layout():
            entries.append({"store": store_name, "name": d["name"], "shape": d["shape"],
                            "offset": off + d["offset"]})
        flat = store.flat()
        chunks.append(flat)
        off += flat.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    manifest = {
        "format": "maggnn-checkpoint/1",
        "dtype": BLOB_DTYPE,
        "num_values": int(blob.size),
        "tensors": entries,
        "step_counts": {k: s.step_count for k, s in stores.items()},
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(blob.astype(BLOB_DTYPE).tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> dict:
    p = Path(path).with_suffix(".json")
    if not p.exists():
        raise CheckpointError(f"missing checkpoint manifest {p}")
    return json.loads(p.read_text())


def load_checkpoint(path: str | Path, stores: dict[str, ParamStore]) -> dict:
    """Fill ``stores`` in place; returns the manifest ``meta`` block."""
    path = Path(path)
    manifest = read_manifest(path)
    bin_path = path.with_suffix(".bin")
    if not bin_path.exists():
        raise CheckpointError(f"missing checkpoint blob {bin_path}")
    blob = np.frombuffer(bin_path.read_bytes(), dtype=BLOB_DTYPE).astype(np.float64)
    if blob.size != manifest["num_values"]:
        raise CheckpointError("blob size does not match manifest")
    by_store: dict[str, list[dict]] = {}
    for e in manifest["tensors"]:
        by_store.setdefault(e["store"], []).append(e)
    for name, store in stores.items():
        entries = by_store.get(name)
        if entries is None:
            raise CheckpointError(f"checkpoint has no store {name!r}")
        mine = [(d["name"], d["shape"]) for d in store.layout()]
        theirs = [(e["name"], e["shape"]) for e in entries]
        if mine != theirs:
            raise CheckpointError(f"store {name!r} layout mismatch")
        start = entries[0]["offset"] if entries else 0
        try:
            store.load_flat(blob[start:start + store.num_values()])
        except ShapeError as exc:
            raise CheckpointError(str(exc)) from exc
        store.step_count = manifest.get("step_counts", {}).get(name, 0)
    return manifest.get("meta", {})
