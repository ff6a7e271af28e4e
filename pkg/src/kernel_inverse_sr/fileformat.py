"""Versioned binary container used for kernel galleries and model checkpoints.

Layout (all integers little-endian)::

    magic     4 bytes   b"KISR"
    version   uint16
    kind      4 bytes   b"GALL" or b"LCNN"
    hdr_len   uint32
    header    hdr_len bytes of UTF-8 JSON (config, shapes, provenance)
    n_values  uint64
    payload   n_values little-endian float64

The JSON header makes files self-describing; the float payload keeps values
bit-exact across round trips.
"""

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"KISR"
VERSION = 1
_PREFIX = struct.Struct("<4sH4sI")
_COUNT = struct.Struct("<Q")


def write_container(path, kind, header, values):
    values = np.ascontiguousarray(values, dtype="<f8").ravel()
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, kind, len(hdr)))
        fh.write(hdr)
        fh.write(_COUNT.pack(values.size))
        fh.write(values.tobytes())


def read_container(path, kind):
    """Parse a container file, returning ``(header, values)``.

    Raises :class:`FormatError` carrying the byte offset of the first problem.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < _PREFIX.size:
        raise FormatError("file too short for container prefix", offset=len(data))
    magic, version, got_kind, hdr_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    if got_kind != kind:
        raise FormatError(f"expected a {kind!r} container, found {got_kind!r}", offset=6)

    pos = _PREFIX.size
    if len(data) < pos + hdr_len:
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[pos:pos + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=pos) from None
    pos += hdr_len

    if len(data) < pos + _COUNT.size:
        raise FormatError("truncated value count", offset=len(data))
    (n_values,) = _COUNT.unpack_from(data, pos)
    pos += _COUNT.size
    expected_end = pos + 8 * n_values
    if len(data) < expected_end:
        raise FormatError(
            f"truncated payload: need {8 * n_values} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    if len(data) > expected_end:
        raise FormatError("trailing bytes after payload", offset=expected_end)
    values = np.frombuffer(data, dtype="<f8", count=n_values, offset=pos).astype(np.float64)
    return header, values
