"""Bit-exact checkpoints: raw little-endian float64 payload plus a JSON manifest.

``name.ckpt`` holds the concatenated segments, ``name.ckpt.json`` describes
them (offset, length, shape, sha256).  Loading re-checks every length and hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ClassGaussian, ClassPrototype
from .model import AdapterLayout, ParameterVector
from .stats import FusionStatistics

__all__ = ["Checkpoint", "CheckpointError", "atomic_write", "load_checkpoint", "save_checkpoint"]

FORMAT_VERSION = 1
_DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write the whole file via a temporary sibling and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(eq=False)
class Checkpoint:
    layout: AdapterLayout
    vectors: dict[str, ParameterVector]
    task_index: int = 0
    strategy: str = ""
    prototypes: dict[int, ClassPrototype] = field(default_factory=dict)
    gaussians: dict[int, ClassGaussian] = field(default_factory=dict)
    stats: FusionStatistics | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return False
        return _segments(self) == _segments(other) and _meta(self) == _meta(other)


def _segments(ck: Checkpoint) -> list[tuple[str, tuple[int, ...], bytes]]:
    segs = []
    for name, vec in ck.vectors.items():
        if vec.layout != ck.layout:
            raise CheckpointError(f"vector {name!r} does not match the checkpoint layout")
        segs.append((f"vector/{name}", vec.data.shape, vec.data.astype(_DTYPE).tobytes()))
    if ck.prototypes:
        mat = np.stack([ck.prototypes[c].w for c in sorted(ck.prototypes)])
        segs.append(("prototypes", mat.shape, mat.astype(_DTYPE).tobytes()))
    if ck.gaussians:
        ids = sorted(ck.gaussians)
        mu = np.stack([ck.gaussians[c].mu for c in ids])
        var = np.stack([ck.gaussians[c].var for c in ids])
        segs.append(("gaussians/mu", mu.shape, mu.astype(_DTYPE).tobytes()))
        segs.append(("gaussians/var", var.shape, var.astype(_DTYPE).tobytes()))
    if ck.stats is not None:
        for name, vec in (("stats/grad", ck.stats.grad), ("stats/fisher", ck.stats.fisher)):
            segs.append((name, vec.data.shape, vec.data.astype(_DTYPE).tobytes()))
    return segs


def _meta(ck: Checkpoint) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layout": ck.layout.to_dict(),
        "task_index": int(ck.task_index),
        "strategy": ck.strategy,
        "prototype_classes": [int(c) for c in sorted(ck.prototypes)],
        "gaussian_classes": [int(c) for c in sorted(ck.gaussians)],
    }


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    payload = bytearray()
    entries = []
    for name, shape, raw in _segments(ck):
        entries.append({
            "name": name,
            "offset": len(payload),
            "length": len(raw) // 8,
            "shape": list(shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payload += raw
    manifest = _meta(ck)
    manifest["segments"] = entries
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    atomic_write(path, bytes(payload))
    atomic_write(manifest_path(path), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"payload hash mismatch in {path}")
    layout = AdapterLayout.from_dict(manifest["layout"])
    arrays = {}
    end = 0
    for seg in manifest["segments"]:
        lo, n = seg["offset"], seg["length"]
        raw = payload[lo : lo + 8 * n]
        if len(raw) != 8 * n or int(np.prod(seg["shape"])) != n:
            raise CheckpointError(f"segment {seg['name']!r} length does not match the manifest")
        if hashlib.sha256(raw).hexdigest() != seg["sha256"]:
            raise CheckpointError(f"segment {seg['name']!r} hash mismatch")
        arrays[seg["name"]] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(seg["shape"])
        end = max(end, lo + 8 * n)
    if end != len(payload):
        raise CheckpointError(f"payload has {len(payload) - end} trailing bytes")

    vectors = {name[len("vector/"):]: ParameterVector(a, layout) for name, a in arrays.items()
               if name.startswith("vector/")}
    protos = {}
    if "prototypes" in arrays:
        protos = {c: ClassPrototype(c, row) for c, row in zip(manifest["prototype_classes"], arrays["prototypes"])}
    gaussians = {}
    if "gaussians/mu" in arrays:
        gaussians = {
            c: ClassGaussian(c, mu, var)
            for c, mu, var in zip(manifest["gaussian_classes"], arrays["gaussians/mu"], arrays["gaussians/var"])
        }
    stats = None
    if "stats/grad" in arrays:
        stats = FusionStatistics.from_arrays(ParameterVector(arrays["stats/grad"], layout),
                                             ParameterVector(arrays["stats/fisher"], layout))
    return Checkpoint(layout, vectors, manifest["task_index"], manifest["strategy"], protos, gaussians, stats)
