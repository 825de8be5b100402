"""Synthetic stand-ins for recorded drives.

``generate_synthetic`` builds a ready-to-train dataset in which the steering
label has a lane-geometry part visible in the image and a speed part that
only the CAN features reveal. ``generate_stream_pair`` and
``write_raw_recording`` produce raw CAN/frame streams with a known clock
offset for exercising the synchronisation path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .canlog import FEATURE_SIGNALS, LABEL_SIGNAL, CanFeatureRow, SignalUpdate, format_can_log
from .dataset import Dataset
from .errors import BadGroupCount, InvalidConfig
from .videostream import FRAME_PERIOD_MS, SAVE_GAP_MS, FrameRecord, Image, save_image, write_manifest

IMAGE_SHAPE = (66, 200, 3)

# label = LANE_GAIN * slope + speed_gain * (speed - SPEED_REF) + noise
LANE_GAIN = 0.1
SPEED_GAIN = 0.002
SPEED_REF = 45.0
LABEL_NOISE = 0.005

# per-group share of highway driving, after the five recording groups:
# residential with a little highway, highway, half/half, highway, residential
GROUP_HIGHWAY_SHARE = {1: 0.2, 2: 1.0, 3: 0.5, 4: 1.0, 5: 0.2}
HIGHWAY_SPEED = (65.0, 5.0)
RESIDENTIAL_SPEED = (25.0, 6.0)

# independent sub-streams of one seed
_STREAM = {"data": 1, "shuffle": 3, "streams": 4}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM[name]])


def render_lane(slope: float, rng: np.random.Generator | None = None, shape=IMAGE_SHAPE,
                brightness: float = 0.0, noise: float = 0.02) -> np.ndarray:
    """Road scene with one bright lane line whose top end is displaced
    sideways in proportion to ``slope``."""
    h, w, _ = shape
    horizon = int(round(0.3 * h))
    img = np.empty(shape)
    img[:horizon] = np.array([0.55, 0.65, 0.8]) + brightness
    img[horizon:] = np.array([0.25, 0.25, 0.27]) + brightness
    ys = np.arange(horizon, h)[:, None]
    xs = np.arange(w)[None, :]
    depth = (h - 1 - ys) / max(h - 1 - horizon, 1)
    centre = w / 2 + slope * 0.3 * w * depth
    width = 1.0 + 1.5 * (1 - depth)
    line = np.exp(-((xs - centre) / width) ** 2)[:, :, None]
    img[horizon:] = img[horizon:] * (1 - line) + np.array([1.0, 0.95, 0.7]) * line
    if rng is not None and noise > 0:
        img = img + rng.normal(0.0, noise, size=shape)
    return np.clip(img, 0.0, 1.0)


def draw_speeds(rng: np.random.Generator, group: int, n: int) -> np.ndarray:
    highway = rng.random(n) < GROUP_HIGHWAY_SHARE[group]
    hw = rng.normal(*HIGHWAY_SPEED, size=n)
    res = rng.normal(*RESIDENTIAL_SPEED, size=n)
    return np.maximum(np.where(highway, hw, res), 0.0)


def battery(rng: np.random.Generator, speed: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack voltage sags slightly and discharge current grows with speed;
    power is exactly V*I/1000 (kW)."""
    voltage = 401.0 - 0.005 * speed + rng.normal(0.0, 0.5, size=speed.shape)
    current = -(3.1 * speed + rng.normal(0.0, 5.0, size=speed.shape))
    return voltage, current, voltage * current / 1000.0


def steering_speed_series(rng: np.random.Generator, n: int) -> np.ndarray:
    """Noisy |derivative| (deg/s) of a slowly wandering wheel-angle process
    that is independent of the label."""
    wheel = np.zeros(n + 1)
    for k in range(1, n + 1):
        wheel[k] = 0.95 * wheel[k - 1] + rng.normal(0.0, 0.2)
    rate = np.abs(np.diff(wheel)) / (FRAME_PERIOD_MS / 1000.0)
    return np.maximum(rate + rng.normal(0.0, 0.25, size=n), 0.0)


def generate_synthetic(seed: int, n_per_group: int = 200, groups: int = 5,
                       speed_gain: float = SPEED_GAIN, lane_gain: float = LANE_GAIN,
                       label_noise: float = LABEL_NOISE) -> Dataset:
    if groups != len(GROUP_HIGHWAY_SHARE):
        raise BadGroupCount(f"generator models {len(GROUP_HIGHWAY_SHARE)} recording groups, asked for {groups}")
    if n_per_group < 10:
        raise InvalidConfig("n_per_group must be at least 10")
    rng = stream_rng(seed, "data")
    n = n_per_group * groups
    ts, gids, can, ys, imgs = [], [], [], [], np.empty((n,) + IMAGE_SHAPE)
    t0 = 0.0
    for g in range(1, groups + 1):
        slope = rng.uniform(-1.0, 1.0, size=n_per_group)
        speed = draw_speeds(rng, g, n_per_group)
        v, i, p = battery(rng, speed)
        steer_rate = steering_speed_series(rng, n_per_group)
        brightness = rng.uniform(-0.08, 0.08, size=n_per_group)
        label = lane_gain * slope + speed_gain * (speed - SPEED_REF) + rng.normal(0.0, label_noise, n_per_group)
        base = (g - 1) * n_per_group
        for k in range(n_per_group):
            imgs[base + k] = render_lane(slope[k], rng, brightness=brightness[k])
        t = t0 + FRAME_PERIOD_MS * np.arange(n_per_group)
        t0 = t[-1] + SAVE_GAP_MS
        ts.append(t)
        gids.append(np.full(n_per_group, g))
        can.append(np.column_stack([v, i, p, steer_rate, speed]))
        ys.append(label)
    return Dataset(np.concatenate(ts), np.concatenate(gids).astype(np.int64), np.vstack(can),
                   np.concatenate(ys), imgs)


# ---------------------------------------------------------------------------
# raw paired streams with a known clock offset
# ---------------------------------------------------------------------------

@dataclass
class StreamPair:
    rows: list[CanFeatureRow]            # CAN clock
    frames: list[tuple[FrameRecord, Image]]  # video clock
    true_offset_ms: float                # video = can + offset
    can_period_ms: float


def generate_stream_pair(rng: np.random.Generator, offset_ms: float, duration_ms: float = 20_000.0,
                         stop_at_ms: float = 8_000.0, stop_len_ms: float = 3_000.0,
                         can_period_ms: float = 25.0, image_shape=(12, 16, 1)) -> StreamPair:
    """A drive with a single stop. CAN rows cover the whole drive on their own
    clock; the camera clock reads ``can_time + offset_ms``. The camera sees
    an unchanging scene exactly while the car is stopped."""
    def moving(t: float) -> bool:
        return not (stop_at_ms <= t < stop_at_ms + stop_len_ms)

    # CAN rows, sampled on a grid whose phase is unrelated to the frame grid
    phase = rng.uniform(0.0, can_period_ms)
    row_t = np.arange(phase, duration_ms, can_period_ms)
    rows = []
    for t in row_t:
        speed = rng.uniform(20.0, 40.0) if moving(t) else 0.0
        v = 400.0 + rng.normal(0.0, 0.5)
        cur = -3.0 * speed + rng.normal(0.0, 2.0)
        rows.append(CanFeatureRow(float(t), v, cur, v * cur / 1000.0, abs(rng.normal(0.0, 3.0)),
                                  speed, float(rng.normal(0.0, 0.1))))
    # frames: one every 1000/36 ms of drive time, from a random start
    start = rng.uniform(0.0, 500.0)
    still = None
    frames = []
    for k, t in enumerate(np.arange(start, duration_ms - 500.0, FRAME_PERIOD_MS)):
        if moving(t):
            px = rng.random(image_shape)
            still = None
        else:
            if still is None:
                still = rng.random(image_shape)
            px = still
        rec = FrameRecord(1, k, float(t + offset_ms), f"frame_{k:05d}.ppm")
        frames.append((rec, Image(px)))
    return StreamPair(rows, frames, float(offset_ms), can_period_ms)


def write_raw_recording(out_dir, seed: int = 0, segments: int = 2, frames_per_segment: int = 180,
                        can_lead_ms: float = 1500.0, gap_ms: float = SAVE_GAP_MS,
                        stop_frames: int = 40, image_shape=(33, 100, 3)) -> dict:
    """Write a small raw recording: ``can.csv`` (1 ms CAN log), ``manifest.csv``
    and PPM frames under ``frames/``. Each segment contains one stop.

    The CAN logger runs continuously, including through save gaps, and was
    started ``can_lead_ms`` before the camera. Returns the true per-group
    offsets (video clock = CAN clock + offset) after segment concatenation.
    """
    from .videostream import concatenate_segments

    rng = stream_rng(seed, "streams")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    period = FRAME_PERIOD_MS
    seg_len = frames_per_segment * period
    records = []
    updates: list[SignalUpdate] = []
    can_starts = []
    seg_start_can = can_lead_ms
    for seg in range(1, segments + 1):
        stop_first = int(rng.integers(frames_per_segment // 4, frames_per_segment // 2))
        stop_t0 = stop_first * period
        stop_t1 = (stop_first + stop_frames) * period
        can_starts.append(seg_start_can)
        still = None
        for k in range(frames_per_segment):
            local = k * period
            if stop_t0 <= local < stop_t1:
                if still is None:
                    still = render_lane(float(rng.uniform(-1, 1)), rng, shape=image_shape)
                px = still
            else:
                px = render_lane(float(np.sin(local / 900.0 + seg)), rng, shape=image_shape)
            name = f"seg{seg}_{k:05d}.ppm"
            save_image(out / "frames" / name, Image(px))
            records.append(FrameRecord(seg, k, local, name))
        # every signal refreshed on its own cadence at 1 ms resolution
        t = np.arange(0.0, seg_len, 1.0)
        speed = np.where((t >= stop_t0) & (t < stop_t1), 0.0, 30.0 + 5.0 * np.sin(t / 700.0))
        for name_, cadence in zip(FEATURE_SIGNALS + (LABEL_SIGNAL,), (10, 10, 10, 20, 5, 5)):
            for tt in t[::cadence]:
                sp = float(speed[int(tt)])
                if name_ == "Voltage":
                    val = 400.5
                elif name_ == "Current":
                    val = -3.0 * sp
                elif name_ == "Power":
                    val = 400.5 * (-3.0 * sp) / 1000.0
                elif name_ == "SteeringSpeed":
                    val = abs(np.cos(tt / 500.0)) * 5.0
                elif name_ == "Speed":
                    val = sp
                else:
                    val = 0.05 * np.sin(tt / 900.0 + seg)
                updates.append(SignalUpdate(float(seg_start_can + tt), name_, float(val)))
        seg_start_can += seg_len + gap_ms
    updates.sort(key=lambda u: u.timestamp_ms)
    (out / "can.csv").write_text(format_can_log(updates))
    with open(out / "manifest.csv", "w") as fh:
        write_manifest(fh, records)
    unified = concatenate_segments(records, gap_ms)
    video_starts = {}
    for r in unified:
        video_starts.setdefault(r.segment_id, r.timestamp_ms)
    offsets = {seg: video_starts[seg] - can_starts[seg - 1] for seg in range(1, segments + 1)}
    return {"segments": segments, "true_offsets_ms": offsets}
