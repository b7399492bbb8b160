"""Checkpoint and run-manifest files.

A checkpoint is a text header followed by raw little-endian float64 data::

    ovdet-checkpoint 1
    meta <key> <json value>
    tensor <name> <d0,d1,...> <byte offset>
    end

Offsets count from the first byte after the ``end`` line, so any reader that
can split on that line and map float64 buffers can load the file.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = "ovdet-checkpoint 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: Dict[str, object]) -> None:
    lines = [MAGIC]
    for key in sorted(meta):
        lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True)}")
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, object]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not an ovdet checkpoint")
    body = raw[cut + len(marker):]
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    meta: Dict[str, object] = {}
    for line in raw[:cut].decode("utf-8").splitlines()[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = json.loads(value)
        elif kind == "tensor":
            name, shape_s, off_s = rest.split(" ")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            off = int(off_s)
            n = int(np.prod(shape)) if shape else 1
            if off + 8 * n > len(body):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    return arrays, meta


def write_manifest(path, entries: Dict[str, object]) -> None:
    """Write ``key=value`` lines atomically, keys sorted."""
    text = "".join(f"{k}={entries[k]}\n" for k in sorted(entries))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_manifest(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out
