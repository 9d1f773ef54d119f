"""On-disk formats.

Volume file::

    b"VOLJ0001" | u32 header length | JSON header | raw voxels | u32 CRC32

The header records ``shape`` ``[nx, ny, nz]`` and ``dtype`` (little-endian
numpy code); voxels are stored x-fastest. The CRC covers every preceding
byte.

Checkpoint container::

    b"NEAT0001" | u32 section count | sections... | u32 CRC32

Each section is ``u16 name length | name (utf-8) | u8 kind | payload``.
Kind 0 (array): ``u8 dtype length | dtype | u8 ndim | u64 dims... | u64 byte
count | bytes`` (C order). Kind 1 (JSON): ``u64 byte count | utf-8 text``.
All integers are little-endian.
"""

from __future__ import annotations

import contextlib
import json
import os
import shutil
import struct
import tempfile
import zlib

import numpy as np

from ..errors import FormatError

VOLUME_MAGIC = b"VOLJ0001"
CHECKPOINT_MAGIC = b"NEAT0001"
_ARRAY, _JSON = 0, 1


@contextlib.contextmanager
def staged(path, is_dir=False):
    """Yield a temporary sibling path; move it onto ``path`` only on success."""
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".staging-", dir=parent)
    target = os.path.join(tmp, os.path.basename(path))
    if is_dir:
        os.makedirs(target)
    try:
        yield target
        if is_dir and os.path.isdir(path):
            shutil.rmtree(path)
        os.replace(target, path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _le(a):
    a = np.asarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


# --------------------------------------------------------------------------
# volumes

def save_volume(path, data, **meta):
    data = _le(np.asarray(data))
    if data.ndim != 3:
        raise FormatError("volume data must be 3-D")
    header = dict(meta)
    header.update(shape=list(data.shape), dtype=data.dtype.str, order="x-fastest")
    hb = json.dumps(header, sort_keys=True).encode()
    body = VOLUME_MAGIC + struct.pack("<I", len(hb)) + hb + np.ascontiguousarray(data.transpose(2, 1, 0)).tobytes()
    with staged(path) as tmp, open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_volume(path):
    """Returns ``(data [x, y, z], header dict)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file (bad magic or version)")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    (hl,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hl])
        shape = tuple(int(s) for s in header["shape"])
        dtype = np.dtype(header["dtype"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad header ({e})") from None
    blob = raw[12 + hl:-4]
    if len(blob) != int(np.prod(shape)) * dtype.itemsize:
        raise FormatError(f"{path}: voxel block size does not match shape {shape}")
    data = np.frombuffer(blob, dtype=dtype).reshape(shape[::-1]).transpose(2, 1, 0).copy()
    return data, header


# --------------------------------------------------------------------------
# checkpoint container

def write_container(path, arrays, meta):
    """Write named arrays plus one JSON ``meta`` section."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays) + 1)]
    for name in sorted(arrays):
        a = np.ascontiguousarray(_le(arrays[name]))
        nb = name.encode()
        ds = a.dtype.str.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", _ARRAY),
                  struct.pack("<B", len(ds)), ds, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), struct.pack("<Q", a.nbytes), a.tobytes()]
    mb = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<H", 4), b"meta", struct.pack("<B", _JSON), struct.pack("<Q", len(mb)), mb]
    body = b"".join(parts)
    with staged(path) as tmp, open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def read_container(path):
    """Returns ``(arrays, meta)``; any damage raises ``FormatError`` before data is handed out."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic or version)")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    body = memoryview(raw)[:-4]
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{path}: unexpected end of data")
        out = body[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays, meta = {}, None
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode()
        (kind,) = struct.unpack("<B", take(1))
        if kind == _ARRAY:
            (dl,) = struct.unpack("<B", take(1))
            dtype = np.dtype(bytes(take(dl)).decode())
            (nd,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{nd}Q", take(8 * nd))
            (nb,) = struct.unpack("<Q", take(8))
            if nb != int(np.prod(shape)) * dtype.itemsize:
                raise FormatError(f"{path}: section {name!r} size does not match its shape")
            arrays[name] = np.frombuffer(bytes(take(nb)), dtype=dtype).reshape(shape).copy()
        elif kind == _JSON:
            (nb,) = struct.unpack("<Q", take(8))
            meta = json.loads(bytes(take(nb)).decode())
        else:
            raise FormatError(f"{path}: unknown section kind {kind}")
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after the last section")
    if meta is None:
        raise FormatError(f"{path}: missing meta section")
    return arrays, meta
