"""Spike datasets: Yin-Yang generator, MNIST latency encoding, augmentation.

A dataset is stored densely: ``spikes`` has shape (n, channels, slots) with
+inf in unused slots, which is the layout the network consumes directly.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


@dataclass
class SpikeDataset:
    spikes: np.ndarray  # (n, C, S), +inf = no spike
    labels: np.ndarray  # (n,)
    n_channels: int
    duration: float
    n_classes: int

    def __post_init__(self) -> None:
        self.spikes = np.asarray(self.spikes, float)
        self.labels = np.asarray(self.labels, np.int64)
        if self.spikes.ndim != 3 or self.spikes.shape[1] != self.n_channels:
            raise ValueError("spikes must be (n, n_channels, slots)")
        fin = self.spikes[np.isfinite(self.spikes)]
        if fin.size and (fin.min() < 0 or fin.max() > self.duration + 1e-12):
            raise ValueError("spike times outside [0, duration]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SpikeDataset":
        return SpikeDataset(self.spikes[idx], self.labels[idx], self.n_channels, self.duration, self.n_classes)

    def instance(self, k: int) -> list:
        """(channel, time) pairs of instance ``k`` in time order."""
        ch, slot = np.nonzero(np.isfinite(self.spikes[k]))
        pairs = sorted(zip(ch.tolist(), self.spikes[k][ch, slot].tolist()), key=lambda x: x[1])
        return pairs

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.spikes[idx], self.labels[idx]


# Yin-Yang ---------------------------------------------------------------


def yinyang_class(x, y, r_small: float = 0.1, r_big: float = 0.5):
    """Region label of points inside the big circle: 0 yang, 1 yin, 2 dot."""
    x = np.asarray(x)
    y = np.asarray(y)
    d_right = np.hypot(x - 1.5 * r_big, y - r_big)
    d_left = np.hypot(x - 0.5 * r_big, y - r_big)
    is_yin = (
        (d_right <= r_small)
        | ((d_left > r_small) & (d_left <= 0.5 * r_big))
        | ((y > r_big) & (d_right > 0.5 * r_big))
    )
    is_dot = (d_right < r_small) | (d_left < r_small)
    return np.where(is_dot, 2, is_yin.astype(np.int64))


def _sample_yinyang(n: int, rng: np.random.Generator, r_small: float, r_big: float):
    xs = np.empty(n)
    ys = np.empty(n)
    labels = np.empty(n, np.int64)
    for k in range(n):
        goal = rng.integers(3)
        while True:
            x, y = rng.random(2) * 2 * r_big
            if np.hypot(x - r_big, y - r_big) > r_big:
                continue
            if yinyang_class(x, y, r_small, r_big) == goal:
                break
        xs[k], ys[k], labels[k] = x, y, goal
    return xs, ys, labels


def generate_yinyang(
    n: int,
    t_late: float = 0.002,
    bias_spike: bool = True,
    seed: int = 0,
    r_small: float = 0.1,
    r_big: float = 0.5,
    bias_time: float = 0.0,
) -> SpikeDataset:
    """Yin-Yang points encoded as spike times.

    A point (x, y) in the unit square becomes spikes at t_late * (x, y,
    1 - x, 1 - y) on four channels, plus an optional bias spike at
    ``bias_time`` on a fifth channel.  Classes are drawn uniformly and points
    are rejection-sampled inside the chosen region, so classes are balanced.
    """
    if not t_late > 0:
        raise ValueError("t_late must be positive")
    rng = np.random.default_rng(seed)
    xs, ys, labels = _sample_yinyang(n, rng, r_small, r_big)
    feats = np.stack([xs, ys, 1 - xs, 1 - ys], axis=1) / (2 * r_big)
    times = t_late * feats
    if bias_spike:
        times = np.concatenate([times, np.full((n, 1), bias_time)], axis=1)
    return SpikeDataset(times[..., None], labels, times.shape[1], t_late, 3)


# IDX ----------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string (magic, big-endian dims, payload)."""
    if len(raw) < 4:
        raise IdxFormatError("truncated magic number", len(raw))
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxFormatError("magic number must start with two zero bytes", 0)
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"unknown data type code 0x{code:02x}", 2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise IdxFormatError(f"payload size mismatch, expected {expected} bytes total", min(len(raw), expected))
    return np.frombuffer(raw, dtype, offset=header).reshape(dims)


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in _IDX_CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    head = struct.pack(">HBB", 0, _IDX_CODES[dtype], arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(dtype).tobytes()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(arr))


def latency_encode(images: np.ndarray, t_late: float) -> np.ndarray:
    """Pixels 1..255 map linearly to times t_late..0; zero pixels never spike."""
    px = np.asarray(images).reshape(len(images), -1).astype(float)
    times = t_late * (255.0 - px) / 254.0
    return np.where(px > 0, times, np.inf)[..., None]


def load_mnist_latency(image_file, label_file, t_late: float = 0.03) -> SpikeDataset:
    images = read_idx(image_file)
    labels = read_idx(label_file)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError("expected (n, rows, cols) images and (n,) labels")
    spikes = latency_encode(images, t_late)
    return SpikeDataset(spikes, labels.astype(np.int64), spikes.shape[1], t_late, 10)


def split(ds: SpikeDataset, sizes, seed: int = 0, stratify: bool = True) -> list:
    """Disjoint random subsets of the given sizes (class-balanced if asked)."""
    rng = np.random.default_rng(seed)
    if not stratify:
        order = rng.permutation(len(ds))
    else:
        per_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
        # round-robin over classes keeps every prefix balanced
        order = []
        depth = max(len(p) for p in per_class)
        for k in range(depth):
            order.extend(int(p[k]) for p in per_class if k < len(p))
        order = np.array(order)
    if sum(sizes) > len(ds):
        raise ValueError("requested subsets exceed the dataset")
    out = []
    start = 0
    for s in sizes:
        out.append(ds.subset(np.sort(order[start : start + s])))
        start += s
    return out


# Augmentation -------------------------------------------------------------


def augment(
    spikes: np.ndarray,
    dropout_max: float,
    jitter_sigma: float,
    rng: np.random.Generator,
    duration: float,
) -> np.ndarray:
    """Random spike dropout and Gaussian time jitter.

    ``spikes`` is one instance (C, S) or a batch (B, C, S).  Each instance
    draws its own dropout rate uniformly from (0, dropout_max).
    """
    if not 0 <= dropout_max < 1 or jitter_sigma < 0:
        raise ValueError("need 0 <= dropout_max < 1 and jitter_sigma >= 0")
    x = np.array(spikes, float)
    single = x.ndim == 2
    if single:
        x = x[None]
    finite = np.isfinite(x)
    if dropout_max > 0:
        rate = rng.uniform(0.0, dropout_max, size=(x.shape[0], 1, 1))
        drop = rng.random(x.shape) < rate
        x = np.where(drop & finite, np.inf, x)
        finite = np.isfinite(x)
    if jitter_sigma > 0:
        noise = rng.normal(0.0, jitter_sigma, x.shape)
        x = np.where(finite, np.clip(x + noise, 0.0, duration), x)
    return x[0] if single else x


# Text export ---------------------------------------------------------------


def export_text(ds: SpikeDataset, spikes_path, labels_path) -> None:
    """Write "instance channel time" lines plus one label per line."""
    k, c, s = np.nonzero(np.isfinite(ds.spikes))
    t = ds.spikes[k, c, s]
    order = np.lexsort((t, k))
    with open(spikes_path, "w") as fh:
        fh.write(f"# n={len(ds)} channels={ds.n_channels} duration={float(ds.duration)!r} classes={ds.n_classes}\n")
        for i in order:
            fh.write(f"{int(k[i])} {int(c[i])} {float(t[i])!r}\n")
    np.savetxt(labels_path, ds.labels, fmt="%d")


def import_text(spikes_path, labels_path) -> SpikeDataset:
    with open(spikes_path) as fh:
        header = fh.readline().lstrip("# ").split()
        meta = dict(item.split("=") for item in header)
        rows = [line.split() for line in fh if line.strip()]
    n, c = int(meta["n"]), int(meta["channels"])
    labels = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
    per = {}
    for inst, ch, t in rows:
        per.setdefault((int(inst), int(ch)), []).append(float(t))
    slots = max((len(v) for v in per.values()), default=1)
    spikes = np.full((n, c, slots), np.inf)
    for (inst, ch), ts in per.items():
        spikes[inst, ch, : len(ts)] = sorted(ts)
    return SpikeDataset(spikes, labels, c, float(meta["duration"]), int(meta["classes"]))
