"""Checkpoint files: a human-readable JSON manifest followed by a raw payload.

Layout::

    REBALCKPT\\n
    <manifest byte length>\\n
    <manifest: UTF-8 JSON>
    <payload: IEEE-754 binary32, little-endian, row-major, tensors back to back>

Tensor offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .budget import count_params
from .config import ModelConfig
from .model import Model, from_arrays, param_shapes

MAGIC = b"REBALCKPT\n"
FORMAT_VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def config(self) -> ModelConfig | None:
        c = self.manifest.get("config")
        return ModelConfig.from_dict(c) if c is not None else None

    @property
    def total_params(self) -> int:
        return sum(int(a.size) for a in self.arrays.values())


def head_param_count(hidden: int, kind: str, num_labels: int, pooler: bool) -> int:
    width = 2 if kind == "span" else num_labels
    n = hidden * width + width
    if pooler:
        n += hidden * hidden + hidden
    return n


def expected_total(manifest: dict) -> int | None:
    stage = manifest.get("stage")
    if manifest.get("config") is None or stage == "tensor":
        return None
    c = ModelConfig.from_dict(manifest["config"])
    b = count_params(c)
    if stage == "pretrain":
        return b.pretrain_count
    if stage == "finetune":
        return b.finetune_count
    if stage == "task":
        h = manifest["head"]
        return b.finetune_count + head_param_count(c.hidden, h["kind"], h["num_labels"], h["pooler"])
    raise CheckpointError(f"unknown stage {stage!r}")


def write_tensors(path: str | Path, arrays: dict[str, np.ndarray], stage: str,
                  config: ModelConfig | None = None, extra: dict | None = None) -> None:
    entries, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": "rebalance-checkpoint",
        "version": FORMAT_VERSION,
        "dtype": "float32-le",
        "stage": stage,
        "config": config.to_dict() if config is not None else None,
        **(extra or {}),
        "total_params": sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries),
        "payload_bytes": offset,
        "tensors": entries,
    }
    head = json.dumps(manifest, indent=1, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode("ascii"))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str | Path, check_budget: bool = True) -> Checkpoint:
    """Parse and validate; the error names the first check that failed."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad magic: not a rebalance checkpoint")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        mlen = int(rest[:nl])
    except ValueError:
        raise CheckpointError("bad manifest length line") from None
    body = rest[nl + 1:]
    if len(body) < mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(body[:mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {manifest.get('version')}, "
                              f"reader supports {FORMAT_VERSION}")
    payload = body[mlen:]

    offset = 0
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != offset:
            raise CheckpointError(f"offset check failed at {e['name']}: expected {offset}, got {e['offset']}")
        offset += 4 * n
    if offset != manifest.get("payload_bytes"):
        raise CheckpointError("manifest payload_bytes disagrees with tensor entries")
    if len(payload) != offset:
        kind = "truncated payload" if len(payload) < offset else "trailing bytes after payload"
        raise CheckpointError(f"{kind}: expected {offset} bytes, found {len(payload)}")
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=DTYPE, count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    total = sum(int(a.size) for a in arrays.values())
    if total != manifest.get("total_params"):
        raise CheckpointError(f"total check failed: manifest says {manifest.get('total_params')}, "
                              f"tensors hold {total}")
    if check_budget:
        want = expected_total(manifest)
        if want is not None and want != total:
            raise CheckpointError(f"budget mismatch: config implies {want:,} parameters, file holds {total:,}")
    return Checkpoint(manifest, arrays)


def save_checkpoint(model: Model, path: str | Path) -> None:
    write_tensors(path, model.arrays(), model.stage, model.config)


def load_checkpoint(path: str | Path) -> Model:
    ck = read_checkpoint(path)
    if ck.stage not in ("pretrain", "finetune"):
        raise CheckpointError(f"expected a model checkpoint, found stage {ck.stage!r}")
    c = ck.config
    expected = [n for n, _ in param_shapes(c, output_side=ck.stage == "pretrain")]
    if list(ck.arrays) != expected:
        missing = sorted(set(expected) - set(ck.arrays))
        extra = sorted(set(ck.arrays) - set(expected))
        raise CheckpointError(f"inventory mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    return from_arrays(c, ck.arrays)


def save_tensor(path: str | Path, name: str, arr: np.ndarray, extra: dict | None = None) -> None:
    write_tensors(path, {name: arr}, "tensor", None, extra)


def load_tensor(path: str | Path) -> np.ndarray:
    ck = read_checkpoint(path)
    if len(ck.arrays) != 1:
        raise CheckpointError(f"expected a single-tensor file, found {len(ck.arrays)} tensors")
    return next(iter(ck.arrays.values()))
