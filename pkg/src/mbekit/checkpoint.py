"""Flat named-tensor archive for parameter checkpoints.

Layout (bit-exact, see docs/checkpoint_format.md):

    bytes 0..5    magic b"NTAR1\\n"
    bytes 6..13   manifest length M as little-endian uint64
    next M bytes  manifest, UTF-8 JSON
    remainder     tensor payloads, concatenated in manifest order

Each manifest entry holds name, shape, offset (relative to the start of the
data section) and nbytes; payloads are row-major little-endian float64.
"""

import json
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"NTAR1\n"
FORMAT_NAME = "named-tensor-archive-v1"


def save_params(path, params):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        data = params[name].data if isinstance(params[name], Tensor) else params[name]
        blob = np.ascontiguousarray(data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(data)), "offset": offset,
             "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"format": FORMAT_NAME, "dtype": "<f8", "order": "row-major",
         "tensors": entries}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_params(path, requires_grad=True):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a named-tensor archive")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: unsupported format {manifest.get('format')!r}")
        data = fh.read()
    params = {}
    for entry in manifest["tensors"]:
        blob = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(blob, dtype="<f8").reshape(entry["shape"]).copy()
        params[entry["name"]] = Tensor(array, requires_grad=requires_grad)
    return params
