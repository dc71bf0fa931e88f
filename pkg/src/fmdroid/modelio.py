"""Binary container for trained models.

Layout (little endian)::

    8 bytes   magic b"FMDROID\\0"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON, keys sorted: type tag, shapes, mask, payload sizes
    float64[] parameters (``n_float`` values)
    uint8[]   per-feature category codes (``n_cat`` values, partial masks only)

Floats are stored raw so a round trip is bit-exact. The header is written
with sorted keys and no timestamps so equal models give equal bytes.
"""

import json
import struct

import numpy as np

from .errors import ModelFormatError

MAGIC = b"FMDROID\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def write_container(path, type_tag, meta, floats, categories=None):
    floats = np.ascontiguousarray(floats, dtype="<f8").ravel()
    cats = b"" if categories is None else np.asarray(categories, dtype=np.uint8).tobytes()
    header = dict(meta)
    header.update(type=type_tag, n_float=int(floats.size), n_cat=len(cats))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(floats.tobytes())
        fh.write(cats)


def read_container(path, expect_type=None):
    """Return ``(header, floats, categories_or_None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise ModelFormatError(f"{path}: truncated model file")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        n_float = int(header["n_float"])
        n_cat = int(header["n_cat"])
        type_tag = header["type"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt model header ({exc})") from None
    body = start + hlen
    if len(data) != body + 8 * n_float + n_cat:
        raise ModelFormatError(f"{path}: truncated or oversized model payload")
    if expect_type is not None and type_tag != expect_type:
        raise ModelFormatError(f"{path}: expected a {expect_type!r} model, found {type_tag!r}")
    floats = np.frombuffer(data, dtype="<f8", count=n_float, offset=body).astype(np.float64)
    cats = None
    if n_cat:
        cats = np.frombuffer(data, dtype=np.uint8, count=n_cat, offset=body + 8 * n_float).astype(np.int64)
    return header, floats, cats


def model_type(path):
    header, _, _ = read_container(path)
    return header["type"]
