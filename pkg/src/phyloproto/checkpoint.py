"""Tensor container files.

Layout::

    b"PPCKPT01"                  8-byte magic
    uint64 little-endian         length of the JSON header in bytes
    JSON header                  {"entries": [{name, shape, dtype, offset, nbytes}], "meta": {...}}
    raw little-endian values     entry by entry, offsets relative to the end of the header
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import Model, build_model
from .phylo import parse_newick, serialize_newick
from .tape import AdamState
from .training import TrainingProgress

MAGIC = b"PPCKPT01"


class CheckpointError(ValueError):
    pass


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, a in arrays.items():
        a = np.asarray(a)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"name": name, "shape": list(a.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    base = 16 + hlen
    out = OrderedDict()
    for e in header["entries"]:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: entry {e['name']} is truncated")
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header.get("meta", {})


def save_model(path, model: Model, meta: dict | None = None, progress: TrainingProgress | None = None) -> None:
    """Parameters plus tree and config; with ``progress`` also the optimizer moments."""
    info = {
        "tree": serialize_newick(model.tree),
        "config": model.cfg.to_dict(),
    }
    info.update(meta or {})
    arrays = model.state_arrays()
    if progress is not None:
        info["progress"] = {"epoch": progress.epoch, "phase": progress.phase, "adam_step": progress.adam.step}
        for name in sorted(progress.adam.m):
            arrays[f"adam.m.{name}"] = progress.adam.m[name]
            arrays[f"adam.v.{name}"] = progress.adam.v[name]
    save_tensors(path, arrays, info)


def load_progress(path) -> TrainingProgress:
    arrays, meta = load_tensors(path)
    info = meta.get("progress")
    if info is None:
        raise CheckpointError(f"{path}: no training progress recorded")
    adam = AdamState()
    adam.step = int(info["adam_step"])
    for key, value in arrays.items():
        if key.startswith("adam.m."):
            adam.m[key[len("adam.m.") :]] = value
        elif key.startswith("adam.v."):
            adam.v[key[len("adam.v.") :]] = value
    return TrainingProgress(epoch=int(info["epoch"]), phase=info["phase"], adam=adam)


def load_model(path) -> tuple[Model, dict]:
    arrays, meta = load_tensors(path)
    try:
        tree = parse_newick(meta["tree"])
        cfg = ModelConfig.from_dict(meta["config"])
    except KeyError as err:
        raise CheckpointError(f"{path}: missing {err} in metadata") from None
    model = build_model(tree, cfg)
    model.load_arrays(arrays)
    return model, meta
