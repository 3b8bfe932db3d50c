"""``FISH`` checkpoint files: config text plus named float32 tensors.

Layout (little-endian)::

    b"FISH"  u16 version
    u32 len  config text (utf-8)
    tensor section
    u8 has_momentum  [tensor section]

    tensor section = u32 count, then per tensor in sorted name order:
        u16 len  name (utf-8)  u8 ndim  ndim*u32 dims  float32 data
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import format_config, parse_config
from .errors import FormatError

MAGIC = b"FISH"
VERSION = 1
NORM_MEAN = "__norm__.mean"
NORM_STD = "__norm__.std"


@dataclass
class Checkpoint:
    config: object
    tensors: dict
    momentum: dict = None
    config_text: str = field(default=None, repr=False)

    @property
    def norm(self):
        if NORM_MEAN in self.tensors:
            return self.tensors[NORM_MEAN], self.tensors[NORM_STD]
        return None

    def state(self):
        """Tensors that belong to the network (normalization stats removed)."""
        return {k: v for k, v in self.tensors.items() if not k.startswith("__")}


def _write_tensors(out, tensors):
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())


def checkpoint_to_bytes(ckpt):
    text = ckpt.config_text if ckpt.config_text is not None else format_config(ckpt.config)
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<H", VERSION))
    raw = text.encode()
    out.write(struct.pack("<I", len(raw)) + raw)
    _write_tensors(out, ckpt.tensors)
    out.write(struct.pack("<B", 1 if ckpt.momentum is not None else 0))
    if ckpt.momentum is not None:
        _write_tensors(out, ckpt.momentum)
    return out.getvalue()


class _Reader:
    def __init__(self, buf, source):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def tensors(self):
        (count,) = self.unpack("I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("B")
            dims = self.unpack(f"{ndim}I") if ndim else ()
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def checkpoint_from_bytes(buf, source="<bytes>"):
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("H")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    (n,) = r.unpack("I")
    text = r.take(n).decode()
    cfg = parse_config(text, source=f"{source}:config")
    tensors = r.tensors()
    (has_mom,) = r.unpack("B")
    momentum = r.tensors() if has_mom else None
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(cfg, tensors, momentum, text)


def save_checkpoint(path, ckpt):
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes(), source=str(path))
