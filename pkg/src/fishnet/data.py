"""Synthetic image datasets and the ``FTDS`` binary dataset file.

File layout (little-endian)::

    b"FTDS"  u16 version  u32 count  u16 C  u16 H  u16 W  u16 num_classes
    count*C*H*W float32 pixels in [0, 1]
    count u32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FTDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint32
    num_classes: int

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def nbytes(self):
        return _HEADER.size + self.images.size * 4 + self.labels.size * 4


def class_templates(num_classes, shape, seed=0):
    """One fixed oriented-grating pattern per class, values in [0.15, 0.85].

    Orientation, frequency, phase and colour mix are drawn from ``seed`` so the
    classes are well separated but not trivially constant images.
    """
    c, h, w = shape
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((num_classes, c, h, w))
    angles = rng.permutation(num_classes) * np.pi / num_classes
    for k in range(num_classes):
        freq = rng.uniform(1.5, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        colour = rng.uniform(-1.0, 1.0, c)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(angles[k]) + yy * np.sin(angles[k])) + phase)
        out[k] = 0.5 + 0.35 * colour[:, None, None] * wave
    return out


def generate_synthetic(num_classes, per_class, shape, seed=0, split=0, noise=0.2):
    """Class template plus Gaussian pixel noise, clipped to [0, 1].

    Templates depend only on ``seed``; ``split`` selects an independent noise
    stream, so ``split=1`` gives a held-out set for the same classes.
    """
    templates = class_templates(num_classes, shape, seed)
    rng = np.random.default_rng([seed, split + 1])
    labels = np.repeat(np.arange(num_classes, dtype=np.uint32), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = templates[labels] + noise * rng.standard_normal((len(labels), *shape))
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, num_classes)


def nearest_template_accuracy(ds, templates):
    """Accuracy of assigning every image to the closest template (L2)."""
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ t.T + (t ** 2).sum(1)[None]
    return float((d.argmin(1) == ds.labels).mean())


# -- binary format ------------------------------------------------------------------


def dataset_to_bytes(ds):
    n = len(ds)
    c, h, w = ds.shape
    if n and int(ds.labels.max()) >= ds.num_classes:
        raise FormatError(f"label {int(ds.labels.max())} >= num_classes {ds.num_classes}")
    head = _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes)
    return (head + np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def dataset_from_bytes(buf, source="<bytes>"):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, n, c, h, w, classes = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    pix = n * c * h * w
    expected = _HEADER.size + 4 * pix + 4 * n
    if len(buf) != expected:
        raise FormatError(f"{source}: length {len(buf)} does not match header ({expected})")
    images = np.frombuffer(buf, dtype="<f4", count=pix, offset=_HEADER.size)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=_HEADER.size + 4 * pix)
    if n and int(labels.max()) >= classes:
        raise FormatError(f"{source}: label {int(labels.max())} >= num_classes {classes}")
    return Dataset(images.reshape(n, c, h, w).astype(np.float32),
                   labels.astype(np.uint32), classes)


def write_dataset(path, ds):
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes(), source=str(path))


# -- normalization ----------------------------------------------------------------


def channel_stats(images):
    """Per-channel mean and std over N, H, W (float64 accumulation)."""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(images, mean, std):
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def parse_gen_spec(text):
    """``classes=10,per_class=100,shape=3x32x32,seed=0,split=0,noise=0.2``"""
    out = {"num_classes": 10, "per_class": 100, "shape": (3, 32, 32), "seed": 0, "split": 0,
           "noise": 0.2}
    alias = {"classes": "num_classes"}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        key, val = (s.strip() for s in part.split("=", 1))
        key = alias.get(key, key)
        if key not in out:
            raise ValueError(f"unknown dataset key {key!r}")
        if key == "shape":
            out[key] = tuple(int(v) for v in val.lower().split("x"))
            if len(out[key]) != 3:
                raise ValueError(f"shape must be CxHxW, got {val!r}")
        elif key == "noise":
            out[key] = float(val)
        else:
            out[key] = int(val)
    return out
