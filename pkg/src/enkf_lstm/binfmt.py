"""Binary container used for weight vectors, ensembles, checkpoints and PPCA
models.

Layout::

    8 bytes   magic b"ENKFLSTM"
    8 bytes   little-endian uint64, length of the JSON header in bytes
    n bytes   UTF-8 JSON header (sorted keys)
    payload   arrays listed in header["arrays"], each little-endian float64,
              row-major, concatenated in order
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ENKFLSTM"


def dumps(header, arrays):
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(np.shape(arr))} for name, arr in arrays.items()
    ]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(raw)), raw]
    for arr in arrays.values():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob):
    if blob[:8] != MAGIC:
        raise ValueError("not an enkf-lstm binary file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise ValueError(f"truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = (
            np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(blob):
        raise ValueError("trailing bytes after payload")
    return header, arrays


def write(path, header, arrays):
    Path(path).write_bytes(dumps(header, arrays))


def read(path):
    return loads(Path(path).read_bytes())
