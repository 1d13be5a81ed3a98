"""Parameter checkpoints: a text manifest plus one raw float32 buffer.

Layout of a checkpoint directory::

    manifest.txt   one line per tensor, in buffer order:
                   <name> <dtype> <dim0>x<dim1>x...   (dtype is always "float32le";
                   a 0-d tensor writes its shape as "scalar")
    params.bin     concatenation of every tensor's data, little-endian float32,
                   C (row-major) order, no padding or header
    config.txt     optional ``key = value`` lines describing the model

Reading walks the manifest and slices ``params.bin`` by each entry's element
count, so the byte offset of tensor i is 4 * sum of the sizes before it.
"""
from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MANIFEST = "manifest.txt"
BUFFER = "params.bin"
CONFIG = "config.txt"
_DTYPE = np.dtype("<f4")


def _fmt_shape(shape) -> str:
    return "x".join(str(d) for d in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_arrays(path: str, arrays: Mapping[str, np.ndarray], config_text: str | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    lines = []
    with open(os.path.join(path, BUFFER), "wb") as fh:
        for name, arr in arrays.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"tensor name may not contain whitespace: {name!r}")
            arr = np.asarray(arr)
            lines.append(f"{name} float32le {_fmt_shape(arr.shape)}")
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    with open(os.path.join(path, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if config_text is not None:
        with open(os.path.join(path, CONFIG), "w") as fh:
            fh.write(config_text)


def load_arrays(path: str) -> dict:
    with open(os.path.join(path, MANIFEST)) as fh:
        entries = [ln.split() for ln in fh if ln.strip()]
    raw = np.fromfile(os.path.join(path, BUFFER), dtype=_DTYPE)
    out, offset = {}, 0
    for name, dtype, shape_text in entries:
        if dtype != "float32le":
            raise ValueError(f"{name}: unsupported dtype {dtype}")
        shape = _parse_shape(shape_text)
        n = int(np.prod(shape)) if shape else 1
        if offset + n > raw.size:
            raise ValueError(f"{path}: buffer too short for {name}")
        out[name] = raw[offset:offset + n].reshape(shape).astype(np.float32)
        offset += n
    if offset != raw.size:
        raise ValueError(f"{path}: {raw.size - offset} trailing values not described by manifest")
    return out


def load_config_text(path: str) -> str | None:
    p = os.path.join(path, CONFIG)
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return fh.read()
