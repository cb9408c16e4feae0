"""On-disk checkpoints: ``model.json`` metadata plus a flat ``weights.f32`` blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(out_dir, kind: str, arch: dict, arrays: dict[str, np.ndarray], seed: int, **extra) -> Path:
    """Write ``arrays`` in insertion order as little-endian f32."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = [[name, list(np.shape(a))] for name, a in arrays.items()]
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "seed": int(seed),
        "params": table,
        **extra,
    }
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays.values())
    (out / "weights.f32").write_bytes(blob)
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(ckpt_dir, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    ckpt = Path(ckpt_dir)
    meta_path = ckpt / "model.json"
    if not meta_path.exists():
        raise CheckpointError(f"missing checkpoint: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {meta_path}: "
            f"found {meta.get('format_version')}, expected {FORMAT_VERSION}"
        )
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{meta_path} holds a {meta.get('kind')!r} model, expected {kind!r}")
    flat = np.frombuffer((ckpt / "weights.f32").read_bytes(), dtype="<f4")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in meta["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > flat.size:
            raise CheckpointError(f"weights.f32 in {ckpt} is truncated at {name!r}")
        arrays[name] = flat[offset : offset + n].astype(np.float64).reshape(shape)
        offset += n
    if offset != flat.size:
        raise CheckpointError(f"weights.f32 in {ckpt} has {flat.size - offset} trailing values")
    return meta, arrays
