"""Array-backed collection of synchronized samples and its ``.cfz`` file format.

Layout: magic ``CANFUSE1``, version byte, five little-endian uint32 counts
(n_samples, h, w, c, can_dim), then one packed record per sample:
timestamp f8, group_id u1, can_features f8[can_dim], steering_angle f8,
pixels f8[h*w*c].
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagic, EmptyInput, EmptySplit, TruncatedFile, UnknownGroup, VersionMismatch
from .sync import SyncedSample

MAGIC = b"CANFUSE1"
VERSION = 1
_COUNTS = struct.Struct("<5I")


@dataclass
class Dataset:
    timestamps: np.ndarray   # (N,)
    group_ids: np.ndarray    # (N,) int
    can: np.ndarray          # (N, can_dim)
    angles: np.ndarray       # (N,)
    images: np.ndarray       # (N, h, w, c)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(self.timestamps[mask_or_index], self.group_ids[mask_or_index],
                       self.can[mask_or_index], self.angles[mask_or_index], self.images[mask_or_index])

    def samples(self) -> list[SyncedSample]:
        return [SyncedSample(float(t), img, c, float(a), int(g))
                for t, img, c, a, g in zip(self.timestamps, self.images, self.can, self.angles, self.group_ids)]

    @classmethod
    def from_samples(cls, samples: Sequence[SyncedSample]) -> "Dataset":
        if not samples:
            raise EmptyInput("no samples")
        return cls(
            timestamps=np.array([s.timestamp_ms for s in samples], dtype=np.float64),
            group_ids=np.array([s.group_id for s in samples], dtype=np.int64),
            can=np.array([s.can_features for s in samples], dtype=np.float64),
            angles=np.array([s.steering_angle for s in samples], dtype=np.float64),
            images=np.stack([np.asarray(s.image, dtype=np.float64) for s in samples]),
        )

    def groups(self) -> dict[int, int]:
        ids, counts = np.unique(self.group_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def split(self, val_groups) -> tuple["Dataset", "Dataset"]:
        """Leave-groups-out split; same contract as sync.split_groups."""
        val_groups = set(int(g) for g in val_groups)
        unknown = val_groups - set(self.groups())
        if unknown:
            raise UnknownGroup(f"validation groups {sorted(unknown)} not present in data")
        is_val = np.isin(self.group_ids, sorted(val_groups))
        if is_val.all() or not is_val.any():
            raise EmptySplit(f"split on {sorted(val_groups)} leaves an empty side")
        return self.subset(~is_val), self.subset(is_val)

    def equals(self, other: "Dataset") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.timestamps, self.group_ids, self.can, self.angles, self.images),
            (other.timestamps, other.group_ids, other.can, other.angles, other.images)))


def _record_dtype(pixels: int, can_dim: int) -> np.dtype:
    return np.dtype([("t", "<f8"), ("g", "u1"), ("can", "<f8", (can_dim,)),
                     ("y", "<f8"), ("px", "<f8", (pixels,))])


def dumps_dataset(ds: Dataset) -> bytes:
    if len(ds) == 0:
        raise EmptyInput("refusing to save an empty dataset")
    n = len(ds)
    h, w, c = ds.image_shape
    can_dim = ds.can.shape[1]
    rec = np.zeros(n, dtype=_record_dtype(h * w * c, can_dim))
    rec["t"] = ds.timestamps
    rec["g"] = ds.group_ids
    rec["can"] = ds.can
    rec["y"] = ds.angles
    rec["px"] = ds.images.reshape(n, -1)
    return MAGIC + bytes([VERSION]) + _COUNTS.pack(n, h, w, c, can_dim) + rec.tobytes()


def loads_dataset(data: bytes) -> Dataset:
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a CANFUSE1 dataset")
    pos = len(MAGIC)
    if len(data) < pos + 1 + _COUNTS.size:
        raise TruncatedFile("dataset header truncated")
    if data[pos] != VERSION:
        raise VersionMismatch(f"dataset version {data[pos]}, expected {VERSION}")
    n, h, w, c, can_dim = _COUNTS.unpack_from(data, pos + 1)
    pos += 1 + _COUNTS.size
    dt = _record_dtype(h * w * c, can_dim)
    if len(data) - pos != n * dt.itemsize:
        raise TruncatedFile(f"expected {n * dt.itemsize} record bytes, found {len(data) - pos}")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=pos)
    return Dataset(
        timestamps=rec["t"].astype(np.float64),
        group_ids=rec["g"].astype(np.int64),
        can=rec["can"].astype(np.float64).reshape(n, can_dim),
        angles=rec["y"].astype(np.float64),
        images=rec["px"].astype(np.float64).reshape(n, h, w, c),
    )


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path, ds: Dataset | Sequence[SyncedSample]) -> None:
    if not isinstance(ds, Dataset):
        ds = Dataset.from_samples(ds)
    atomic_write_bytes(path, dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
