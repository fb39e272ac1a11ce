"""Binary checkpoint container.

Layout: magic ``HWCK``, u32 format version, u32 header length, UTF-8 JSON
header (architecture description plus the ordered array manifest), then the
named arrays as little-endian float64 in manifest order.
"""

import json
import struct

import numpy as np

MAGIC = b"HWCK"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_arrays(path, header, arrays):
    """Write `arrays` (ordered list of (name, ndarray)) with a JSON header."""
    manifest = [{"name": n, "shape": list(np.asarray(a).shape)} for n, a in arrays]
    doc = dict(header)
    doc["arrays"] = manifest
    blob = json.dumps(doc).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path):
    """Read a checkpoint; returns (header dict, dict name -> float64 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header.pop("arrays"):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        extra = fh.read(1)
        if extra:
            raise CheckpointError(f"{path}: trailing bytes after arrays")
    return header, arrays
