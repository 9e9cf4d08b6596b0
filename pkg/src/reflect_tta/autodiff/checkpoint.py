"""Binary parameter checkpoints.

Layout (all integers little-endian u32)::

    b"RTTA" | version | param_count
    repeat param_count times:
        name_len | name (UTF-8, name_len bytes) | rank | extent_0 .. extent_{rank-1}
        | float32 little-endian values, C order, prod(extents) * 4 bytes
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from ..errors import FormatError

MAGIC = b"RTTA"
VERSION = 1


def dumps(state):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob):
    if blob[:4] != MAGIC:
        raise FormatError("not an RTTA checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos, state = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            state[name] = data.reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return state


def save(path, state):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(dumps(state))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
