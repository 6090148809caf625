"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, bundled digits.

``digits`` is scikit-learn's bundled 8x8 handwritten digit set.  It is
serialized to IDX bytes and read back through the same parser as MNIST, so
the desk-scale runs exercise the IDX path without network access.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

DATA_ENV = "DEPPRUNE_DATA"
CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
DATASETS = ("digits", "mnist", "cifar10")


class IngestError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX file: 2 zero bytes, dtype code, ndim, big-endian u32 dims, data."""
    if len(buf) < 4:
        raise IngestError("IDX header truncated", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IngestError(f"bad IDX magic {buf[:4].hex()}", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_DTYPES:
        raise IngestError(f"unknown IDX type code 0x{code:02x}", 2)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IngestError("IDX dimension header truncated", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    dtype = np.dtype(IDX_DTYPES[code])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end < need:
        raise IngestError(f"IDX payload truncated: need {need} bytes, have {len(buf) - end}", len(buf))
    if len(buf) - end > need:
        raise IngestError(f"{len(buf) - end - need} unexpected trailing bytes", end + need)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=end).reshape(dims)


def write_idx(arr: np.ndarray) -> bytes:
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in codes:
        raise ValueError(f"only uint8/int8 arrays are written, got {arr.dtype}")
    return bytes([0, 0, codes[arr.dtype], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def parse_cifar_batch(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode a CIFAR-10 binary batch into ``(N, 3, 32, 32)`` uint8 images and labels."""
    if len(buf) % CIFAR_RECORD:
        full = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise IngestError(f"CIFAR batch has a partial record ({len(buf) - full} stray bytes)", full)
    recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestError(f"label {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def _read(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror or exc}", 0) from exc
    if path.suffix != ".gz":
        return raw
    try:
        return gzip.decompress(raw)
    except (OSError, EOFError) as exc:
        raise IngestError(f"corrupt gzip stream in {path}: {exc}", 0) from exc


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise IngestError(f"{stem} not found under {root}", 0)


def data_root(root: Optional[str] = None) -> Path:
    return Path(root or os.environ.get(DATA_ENV, "data"))


def _raw_mnist(root: Path, train: bool) -> tuple[np.ndarray, np.ndarray]:
    prefix = "train" if train else "t10k"
    x = parse_idx(_read(_find(root, f"{prefix}-images-idx3-ubyte")))
    y = parse_idx(_read(_find(root, f"{prefix}-labels-idx1-ubyte")))
    if x.ndim != 3 or y.ndim != 1 or len(x) != len(y):
        raise IngestError(f"MNIST images {x.shape} and labels {y.shape} disagree", 4)
    return x[:, None], y.astype(np.int64)


def _raw_cifar(root: Path, train: bool, per_class: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    xs, ys = [], []
    for n in names:
        x, y = parse_cifar_batch(_read(base / n))
        xs.append(x)
        ys.append(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    if per_class:
        idx = np.concatenate([np.flatnonzero(y == c)[:per_class] for c in range(10)])
        idx.sort()
        x, y = x[idx], y[idx]
    return x, y


def digits_idx_bytes() -> tuple[bytes, bytes]:
    """The bundled digits as (images, labels) IDX byte strings, pixels scaled to 0..255."""
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
    return write_idx(images), write_idx(d.target.astype(np.uint8))


def _raw_digits(train: bool) -> tuple[np.ndarray, np.ndarray]:
    xb, yb = digits_idx_bytes()
    x, y = parse_idx(xb)[:, None], parse_idx(yb).astype(np.int64)
    # fixed 80/20 split, independent of the run seed
    order = np.random.default_rng(0).permutation(len(y))
    cut = int(round(0.8 * len(y)))
    idx = np.sort(order[:cut] if train else order[cut:])
    return x[idx], y[idx]


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    flip: bool = False
    pad: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield mini-batches; shuffled and augmented when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if augment and rng is not None:
                x = augment_batch(x, rng, self.pad, self.flip)
            yield x, self.labels[idx]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int, flip: bool) -> np.ndarray:
    """Zero-pad by ``pad`` then randomly crop back to size; optional horizontal flip."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (1, -1, 1, 1)
    return ((images.astype(np.float32) / 255.0 - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    std = x.std(axis=(0, 2, 3))
    # a constant channel carries no scale; leave it unscaled rather than divide by zero
    std = np.where(std > 0, std, 1.0)
    return x.mean(axis=(0, 2, 3)).astype(np.float32), std.astype(np.float32)


DEFAULT_PAD = {"digits": 1, "mnist": 4, "cifar10": 4}


def load_dataset(name: str, split: str, root: Optional[str] = None, seed: int = 0,
                 per_class: Optional[int] = None, val_fraction: float = 0.1,
                 pad: Optional[int] = None) -> Dataset:
    """Load ``split`` in {"train", "val", "test"} of dataset ``name``.

    Normalization statistics come from the training portion.  ``val`` is a
    seed-deterministic ``val_fraction`` of the training files.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    path = data_root(root)
    loaders = {"digits": lambda t: _raw_digits(t),
               "mnist": lambda t: _raw_mnist(path, t),
               "cifar10": lambda t: _raw_cifar(path, t, per_class if t else None)}
    x, y = loaders[name](True)
    order = np.random.default_rng(seed).permutation(len(y))
    n_val = int(round(val_fraction * len(y)))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    mean, std = channel_stats(x[train_idx])
    if split == "test":
        x, y = loaders[name](False)
    elif split == "val":
        x, y = x[val_idx], y[val_idx]
    else:
        x, y = x[train_idx], y[train_idx]
    return Dataset(normalize(x, mean, std), y, flip=name == "cifar10",
                   pad=DEFAULT_PAD[name] if pad is None else pad)
