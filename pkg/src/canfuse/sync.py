"""Bring the CAN row stream and the frame stream onto one clock.

CAN rows are block-averaged down towards the frame rate, a stationary
interval is located in both streams (zero speed on the bus, unchanging
pixels on camera), the difference of the two landmark times gives the clock
offset, and every frame is then paired with its nearest CAN row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .canlog import CanFeatureRow, array_to_rows, rows_to_array
from .errors import (EmptyFrames, EmptyInput, EmptyRows, EmptySplit, NoLandmark,
                     TooFewFrames, UnknownGroup, ZeroFactor)
from .videostream import FrameRecord, Image

DEFAULT_FACTOR = 25
DEFAULT_TOL_MS = 30.0


@dataclass
class SyncedSample:
    timestamp_ms: float
    image: np.ndarray          # (h, w, c) in [0, 1]
    can_features: np.ndarray   # voltage, current, power, steering_speed, speed
    steering_angle: float
    group_id: int


def downsample(rows: Sequence[CanFeatureRow], factor: int = DEFAULT_FACTOR) -> list[CanFeatureRow]:
    """Replace each full block of ``factor`` rows by its field-wise mean; a
    trailing partial block is dropped."""
    if not rows:
        raise EmptyInput("no rows to downsample")
    if factor < 1:
        raise ZeroFactor(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return list(rows)
    return array_to_rows(downsample_array(rows_to_array(rows), factor))


def downsample_array(table: np.ndarray, factor: int) -> np.ndarray:
    n = (len(table) // factor) * factor
    return table[:n].reshape(-1, factor, table.shape[1]).mean(axis=1)


def _longest_run(mask: np.ndarray, min_run: int) -> int | None:
    """Start index of the longest run of True (earliest on ties), or None if
    no run reaches ``min_run``."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    if len(starts) == 0:
        return None
    lengths = ends - starts
    best = int(np.argmax(lengths))  # argmax returns the first maximum
    if lengths[best] < min_run:
        return None
    return int(starts[best])


def detect_zero_speed_landmark(rows: Sequence[CanFeatureRow], eps: float = 1e-6, min_run: int = 5) -> float:
    if not rows:
        raise EmptyInput("no rows")
    if eps < 0 or min_run < 1:
        raise ValueError("eps must be >= 0 and min_run >= 1")
    table = rows_to_array(rows)
    start = _longest_run(np.abs(table[:, 5]) <= eps, min_run)
    if start is None:
        raise NoLandmark(f"no run of >= {min_run} rows with |speed| <= {eps}")
    return float(table[start, 0])


def frame_differences(images: Sequence[np.ndarray]) -> np.ndarray:
    """Mean absolute pixel difference between each consecutive pair."""
    return np.array([np.mean(np.abs(np.asarray(b) - np.asarray(a)))
                     for a, b in zip(images, images[1:])])


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img)


def detect_still_frames(frames: Sequence[tuple[FrameRecord, Image]], delta_thresh: float = 1e-3,
                        min_run: int = 5) -> float:
    """Timestamp of the first frame of the longest stretch of consecutive
    frame-to-frame differences that stay within ``delta_thresh``.
    ``min_run`` counts differences, not frames."""
    if len(frames) < 2:
        raise TooFewFrames(f"need at least 2 frames, got {len(frames)}")
    if delta_thresh <= 0:
        raise ValueError("delta_thresh must be positive")
    diffs = frame_differences([_pixels(img) for _, img in frames])
    start = _longest_run(diffs <= delta_thresh, min_run)
    if start is None:
        raise NoLandmark(f"no run of >= {min_run} still frame pairs")
    return float(frames[start][0].timestamp_ms)


def align(can_landmark_ms: float, video_landmark_ms: float) -> float:
    """Offset that maps CAN time onto video time (video = can + offset)."""
    return float(video_landmark_ms) - float(can_landmark_ms)


@dataclass
class JoinResult:
    samples: list[SyncedSample]
    dropped: int
    skews_ms: list[float]

    @property
    def matched(self) -> int:
        return len(self.samples)


def nearest_rows(frame_t: np.ndarray, row_t: np.ndarray) -> np.ndarray:
    """Index of the nearest row time for every frame time (earlier row on ties)."""
    if len(row_t) == 1:
        return np.zeros(len(frame_t), dtype=int)
    hi = np.clip(np.searchsorted(row_t, frame_t, side="left"), 1, len(row_t) - 1)
    lo = hi - 1
    take_hi = np.abs(row_t[hi] - frame_t) < np.abs(frame_t - row_t[lo])
    return np.where(take_hi, hi, lo)


def join(frames: Sequence[tuple[FrameRecord, Image]], rows: Sequence[CanFeatureRow], offset_ms: float,
         tol_ms: float = DEFAULT_TOL_MS, group_map: Mapping[int, int] | None = None) -> JoinResult:
    if not frames:
        raise EmptyFrames("no frames to join")
    if not rows:
        raise EmptyRows("no CAN rows to join")
    if tol_ms <= 0:
        raise ValueError("tol_ms must be positive")
    table = rows_to_array(rows)
    row_t = table[:, 0] + offset_ms
    frame_t = np.array([rec.timestamp_ms for rec, _ in frames])
    idx = nearest_rows(frame_t, row_t)
    skew = np.abs(frame_t - row_t[idx])
    keep = skew <= tol_ms
    samples = []
    for k in np.flatnonzero(keep):
        rec, img = frames[k]
        r = table[idx[k]]
        group = group_map.get(rec.segment_id, rec.segment_id) if group_map else rec.segment_id
        samples.append(SyncedSample(rec.timestamp_ms, _pixels(img), r[1:6].copy(), float(r[6]), int(group)))
    samples.sort(key=lambda s: s.timestamp_ms)
    return JoinResult(samples, int((~keep).sum()), skew[keep].tolist())


def split_groups(samples: Sequence[SyncedSample], val_groups) -> tuple[list[SyncedSample], list[SyncedSample]]:
    val_groups = set(val_groups)
    present = {s.group_id for s in samples}
    unknown = val_groups - present
    if unknown:
        raise UnknownGroup(f"validation groups {sorted(unknown)} not present in data")
    train = [s for s in samples if s.group_id not in val_groups]
    val = [s for s in samples if s.group_id in val_groups]
    if not train or not val:
        raise EmptySplit(f"split on {sorted(val_groups)} leaves an empty side")
    return train, val


@dataclass
class GroupSync:
    group_id: int
    can_landmark_ms: float
    video_landmark_ms: float
    offset_ms: float
    matched: int
    dropped: int


def synchronize(frames: Sequence[tuple[FrameRecord, Image]], rows: Sequence[CanFeatureRow],
                group_map: Mapping[int, int] | None = None, tol_ms: float = DEFAULT_TOL_MS,
                eps: float = 1e-6, min_run: int = 5, delta_thresh: float = 1e-3,
                window_ms: float = 5000.0) -> tuple[list[SyncedSample], list[GroupSync]]:
    """Align and join each recording group with its own landmark pair.

    The CAN search window for a group is the span of that group's frames
    (mapped through the stream-start offset) widened by ``window_ms``.
    """
    if not frames:
        raise EmptyFrames("no frames")
    if not rows:
        raise EmptyRows("no rows")
    group_map = group_map or {}
    table = rows_to_array(rows)
    start_offset = frames[0][0].timestamp_ms - table[0, 0]
    by_group: dict[int, list] = {}
    for fr in frames:
        by_group.setdefault(group_map.get(fr[0].segment_id, fr[0].segment_id), []).append(fr)
    samples: list[SyncedSample] = []
    report = []
    for gid in sorted(by_group):
        gframes = by_group[gid]
        lo = gframes[0][0].timestamp_ms - start_offset - window_ms
        hi = gframes[-1][0].timestamp_ms - start_offset + window_ms
        window = [r for r, t in zip(rows, table[:, 0]) if lo <= t <= hi]
        if not window:
            raise NoLandmark(f"group {gid}: no CAN rows near its frames")
        try:
            can_mark = detect_zero_speed_landmark(window, eps, min_run)
            vid_mark = detect_still_frames(gframes, delta_thresh, min_run)
        except NoLandmark as exc:
            raise NoLandmark(f"group {gid}: {exc}") from None
        offset = align(can_mark, vid_mark)
        res = join(gframes, window, offset, tol_ms, group_map)
        samples.extend(res.samples)
        report.append(GroupSync(gid, can_mark, vid_mark, offset, res.matched, res.dropped))
    samples.sort(key=lambda s: s.timestamp_ms)
    return samples, report

