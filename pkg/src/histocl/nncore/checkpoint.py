"""Binary checkpoint container.

Layout: magic ``CLDP``, format version (u32 LE), header length (u32 LE), a
canonical JSON header (model spec, layout table, extra metadata, named extra
array table), then the parameter values as little-endian float32, then each
extra array in header order. The header JSON is written with sorted keys and
no whitespace, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import LayoutEntry, ModelSpec, ParamVector

MAGIC = b"CLDP"
FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    spec: ModelSpec,
    params: ParamVector,
    extra: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a checkpoint; ``extra`` must be JSON-serializable."""
    extra_arrays = extra_arrays or {}
    names = sorted(extra_arrays)
    header = {
        "spec": spec.to_dict(),
        "layout": [[e.name, e.offset, list(e.shape)] for e in params.layout],
        "value_count": int(params.values.size),
        "extra": extra or {},
        "arrays": [[n, list(np.asarray(extra_arrays[n]).shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.values.astype("<f4", copy=False).tobytes())
        for n in names:
            f.write(np.asarray(extra_arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ParamVector, dict, dict[str, np.ndarray]]:
    """Read a checkpoint back; returns (spec, params, extra, extra_arrays)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        layout = tuple(
            LayoutEntry(name, int(offset), tuple(int(s) for s in shape))
            for name, offset, shape in header["layout"]
        )
        count = int(header["value_count"])
        values = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float32)
        params = ParamVector(values, layout)
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["arrays"]:
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(4 * size), dtype="<f4").astype(np.float32)
            arrays[name] = arr.reshape([int(s) for s in shape])
    return spec, params, header["extra"], arrays
