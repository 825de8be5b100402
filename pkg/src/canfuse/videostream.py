"""Front-camera frame stream: manifest parsing, segment concatenation across
dashcam save gaps, binary PPM/PGM decoding and bilinear resizing."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (BadMaxval, EmptySegment, MalformedLine, MissingHeader,
                     NonConsecutiveSegments, NonMonotonicFrameIndex, TruncatedFile,
                     UnsupportedFormat, ZeroDimension)

MANIFEST_HEADER = "segment_id,frame_index,timestamp_ms,path"
FPS = 36.0
FRAME_PERIOD_MS = 1000.0 / FPS
SAVE_GAP_MS = 203_000.0


@dataclass(frozen=True)
class FrameRecord:
    segment_id: int
    frame_index: int
    timestamp_ms: float
    path: str


@dataclass
class Image:
    pixels: np.ndarray  # (height, width, channels), values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def load_manifest(source: TextIO | Iterable[str] | str) -> list[FrameRecord]:
    lines = source.splitlines() if isinstance(source, str) else source
    it = iter(lines)
    try:
        header = next(it).strip()
    except StopIteration:
        raise MissingHeader("empty manifest") from None
    if header != MANIFEST_HEADER:
        raise MissingHeader(f"expected header {MANIFEST_HEADER!r}, got {header!r}")
    records = []
    last_index: dict[int, int] = {}
    for line_no, raw in enumerate(it, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",", 3)
        if len(parts) != 4 or not parts[3]:
            raise MalformedLine(line_no)
        try:
            seg, idx, ts = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MalformedLine(line_no) from None
        if seg < 1 or idx < 0 or not math.isfinite(ts):
            raise MalformedLine(line_no)
        if seg in last_index and idx <= last_index[seg]:
            raise NonMonotonicFrameIndex(seg)
        last_index[seg] = idx
        records.append(FrameRecord(seg, idx, ts, parts[3]))
    return records


def write_manifest(fh: TextIO, records: Iterable[FrameRecord]) -> None:
    fh.write(MANIFEST_HEADER + "\n")
    for r in records:
        fh.write(f"{r.segment_id},{r.frame_index},{r.timestamp_ms!r},{r.path}\n")


def concatenate_segments(records: Sequence[FrameRecord], gap_ms: float = SAVE_GAP_MS,
                         fps: float = FPS) -> list[FrameRecord]:
    """Place segments end to end on one clock, with ``gap_ms`` of missing
    video between consecutive segments.

    A segment ends one frame period after its last frame, so a one-minute
    clip at 36 fps ends at exactly 60000 ms. Segment k's local timestamps
    are shifted by (end of segment k-1) + gap_ms.
    """
    groups = [(seg, list(recs)) for seg, recs in groupby(records, key=lambda r: r.segment_id)]
    if not groups:
        return []
    ids = [seg for seg, _ in groups]
    if ids != list(range(1, len(ids) + 1)):
        raise NonConsecutiveSegments(f"segment ids must run 1..n in order, got {ids}")
    out: list[FrameRecord] = []
    offset = 0.0
    for k, (seg, recs) in enumerate(groups):
        if not recs:
            raise EmptySegment(f"segment {seg} has no frames")
        if k > 0:
            offset = out[-1].timestamp_ms + 1000.0 / fps + gap_ms
        out.extend(replace(r, timestamp_ms=r.timestamp_ms + offset) for r in recs)
    for a, b in zip(out, out[1:]):
        if not b.timestamp_ms > a.timestamp_ms:
            raise NonMonotonicFrameIndex(b.segment_id)
    return out


# ---------------------------------------------------------------------------
# PNM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    pos = 0
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFile("header ended early")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data):
        raise TruncatedFile("no raster data")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> Image:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"unsupported image magic {magic!r}")
    channels = 3 if magic == b"P6" else 1
    tokens, start = _header_tokens(data[2:], 3)
    start += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise UnsupportedFormat("non-numeric image header") from None
    if maxval != 255:
        raise BadMaxval(f"maxval {maxval} unsupported, only 255")
    if width < 1 or height < 1:
        raise ZeroDimension("image has a zero dimension")
    need = width * height * channels
    raster = data[start:start + need]
    if len(raster) != need:
        raise TruncatedFile(f"raster has {len(raster)} bytes, expected {need}")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return Image(px / 255.0)


def load_image(path) -> Image:
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(img: Image) -> bytes:
    if img.channels not in (1, 3):
        raise UnsupportedFormat("only 1- or 3-channel images can be written")
    magic = b"P6" if img.channels == 3 else b"P5"
    raw = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + raw.tobytes()


def save_image(path, img: Image) -> None:
    Path(path).write_bytes(encode_pnm(img))


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Corner-aligned bilinear resampling: output corners land exactly on the
    input corners."""
    if out_h < 1 or out_w < 1:
        raise ZeroDimension(f"target size {out_h}x{out_w}")
    src = img.pixels
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return Image(src.copy())

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # convex combination; clip only guards rounding at the bounds
    return Image(np.clip(out, src.min(), src.max()))
