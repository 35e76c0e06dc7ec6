"""Checkpoint format: one JSON header line {names, shapes, dtype, offsets}
followed by the concatenated little-endian float32 parameter bytes.
Round trips are bit-exact."""
from __future__ import annotations

import json

import numpy as np


def save_params(path, params):
    names = list(params)
    shapes, offsets, chunks = {}, {}, []
    off = 0
    for n in names:
        arr = np.ascontiguousarray(params[n], dtype="<f4")
        shapes[n] = list(arr.shape)
        offsets[n] = off
        b = arr.tobytes()
        off += len(b)
        chunks.append(b)
    header = json.dumps({"names": names, "shapes": shapes, "dtype": "f32",
                         "offsets": offsets}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        for b in chunks:
            f.write(b)


def load_params(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    if header["dtype"] != "f32":
        raise ValueError(f"unsupported dtype {header['dtype']!r}")
    out = {}
    for n in header["names"]:
        shape = tuple(header["shapes"][n])
        count = int(np.prod(shape)) if shape else 1
        off = header["offsets"][n]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        out[n] = arr.reshape(shape).copy()
    return out
