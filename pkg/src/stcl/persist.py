"""Binary cube files (``STCB``) and checkpoints (``STCL``).

All integers are little-endian; all values are little-endian float64.

Cube::

    b"STCB" | version u32 | rank u32 | dims u64[rank] | values f64[prod(dims)]

Checkpoint::

    b"STCL" | version u32 | config_len u32 | config utf-8 | count u32
    | count x (name_len u32 | name utf-8 | rank u32 | dims u64[rank] | values f64[...])
    | crc32 u32 of every preceding byte
"""
import struct
import zlib
from collections import OrderedDict

import numpy as np

from stcl.errors import CompatibilityError, InputError

CUBE_MAGIC = b"STCB"
CKPT_MAGIC = b"STCL"
CUBE_VERSION = 1
CKPT_VERSION = 1
_F64 = np.dtype("<f8")


def _array_bytes(arr):
    arr = np.asarray(arr, dtype=_F64, order="C")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, buf, source):
        self.buf = memoryview(buf)
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise InputError(f"{self.source}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        raw = bytes(self.take(self.u32()))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise InputError(f"{self.source}: invalid UTF-8 text block") from None

    def array(self):
        rank = self.u32()
        if rank > 16:
            raise InputError(f"{self.source}: implausible array rank {rank}")
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(8 * n), dtype=_F64).astype(np.float64)
        return data.reshape(dims)


def _read(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _write(path, payload):
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


# -- cubes -------------------------------------------------------------------

def cube_bytes(values):
    return CUBE_MAGIC + struct.pack("<I", CUBE_VERSION) + _array_bytes(values)


def save_cube(path, values):
    _write(path, cube_bytes(values))


def load_cube(path):
    r = _Reader(_read(path), path)
    if bytes(r.take(4)) != CUBE_MAGIC:
        raise InputError(f"{path}: not a cube file (bad magic)")
    version = r.u32()
    if version != CUBE_VERSION:
        raise CompatibilityError(f"{path}: cube format version {version}, expected {CUBE_VERSION}")
    arr = r.array()
    if r.pos != len(r.buf):
        raise InputError(f"{path}: trailing bytes after cube payload")
    return arr


# -- checkpoints ------------------------------------------------------------------

def checkpoint_bytes(config_text, arrays):
    """Serialize a config text block and an ordered ``name -> array`` mapping."""
    text = config_text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, _array_bytes(arr)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, config_text, arrays):
    _write(path, checkpoint_bytes(config_text, arrays))


def parse_checkpoint(buf, source="checkpoint"):
    if len(buf) < 8:
        raise InputError(f"{source}: truncated checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise InputError(f"{source}: checksum mismatch, refusing to load a corrupted checkpoint")
    r = _Reader(body, source)
    if bytes(r.take(4)) != CKPT_MAGIC:
        raise InputError(f"{source}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CompatibilityError(f"{source}: checkpoint version {version}, expected {CKPT_VERSION}")
    config_text = r.text()
    arrays = OrderedDict()
    for _ in range(r.u32()):
        name = r.text()
        arrays[name] = r.array()
    if r.pos != len(body):
        raise InputError(f"{source}: trailing bytes in checkpoint")
    return config_text, arrays


def load_checkpoint(path):
    """``(config_text, arrays)``; the checksum is verified before anything is parsed."""
    return parse_checkpoint(_read(path), str(path))
