"""Spike encodings and dataset readers.

AEDAT 3.1 layout handled here
-----------------------------
ASCII header lines starting with ``#``; the first is ``#!AER-DAT3.1`` and the
last is ``#!END-HEADER``. Then a sequence of packets, each a 28-byte
little-endian header::

    int16 eventType      (1 = polarity)
    int16 eventSource
    int32 eventSize      (8 for polarity events)
    int32 eventTSOffset
    int32 eventTSOverflow
    int32 eventCapacity  (payload holds capacity * size bytes)
    int32 eventNumber
    int32 eventValid

followed by the events. A polarity event is two little-endian 32-bit words:
``data`` and ``timestamp`` (microseconds). Bit fields of ``data``::

    bit  0      valid mark
    bit  1      polarity (1 = ON)
    bits 2-16   y address
    bits 17-31  x address

The full timestamp is ``(eventTSOverflow << 31) | timestamp``.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .temporal import SpikeTrain
from .tensor import Tensor

AEDAT_MAGIC = b"#!AER-DAT3.1"
AEDAT_END = b"#!END-HEADER"
PACKET_HEADER = struct.Struct("<hhiiiiii")
POLARITY_EVENT = 1
POLARITY_SIZE = 8

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

DIRECTIONS = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}  # up, down, left, right as (dx, dy)


class AedatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, packet: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.packet = packet


class IdxError(ValueError):
    pass


# --- rate coding -------------------------------------------------------------

def rate_encode(image, T: int, seed: int | None = None, rng: np.random.Generator | None = None) -> SpikeTrain:
    """Bernoulli spike frames with per-element probability equal to the intensity.

    ``image`` is [C, H, W] (one sample, B = 1) or [B, C, H, W].
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
        raise ValueError("rate coding needs intensities in [0, 1]")
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"expected [C, H, W] or [B, C, H, W], got shape {img.shape}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    frames = (rng.random((T,) + img.shape, dtype=np.float32) < img).astype(np.float32)
    return SpikeTrain([Tensor(f) for f in frames], binary=True)


# --- event streams -----------------------------------------------------------

@dataclass
class EventStream:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sensor_width: int = 128
    sensor_height: int = 128
    t_start: int | None = None
    duration_us: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def start(self) -> int:
        if self.t_start is not None:
            return self.t_start
        return int(self.t.min()) if len(self.t) else 0

    @property
    def duration(self) -> int:
        if self.duration_us is not None:
            return self.duration_us
        return int(self.t.max()) - self.start if len(self.t) else 0

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.x[order], self.y[order], self.t[order], self.p[order], self.sensor_width,
                           self.sensor_height, self.t_start, self.duration_us, dict(self.diagnostics))


def _read_header(buf: bytes) -> int:
    if not buf.startswith(AEDAT_MAGIC):
        raise AedatError("missing '#!AER-DAT3.1' header line", offset=0)
    pos = 0
    while pos < len(buf) and buf[pos:pos + 1] == b"#":
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise AedatError("unterminated header line", offset=pos)
        line = buf[pos:nl]
        pos = nl + 1
        if line.startswith(AEDAT_END):
            break
    return pos


def parse_aedat(buf: bytes, sensor_width: int = 128, sensor_height: int = 128) -> EventStream:
    """Decode the polarity events of an AEDAT 3.1 byte string.

    Non-polarity packets are skipped. Events with the valid bit cleared or
    with coordinates outside the sensor are dropped and counted in
    ``diagnostics``. The result is sorted by timestamp.
    """
    pos = _read_header(buf)
    xs, ys, ts, ps = [], [], [], []
    dropped_invalid = dropped_bounds = skipped_packets = 0
    packet = 0
    while pos < len(buf):
        if len(buf) - pos < PACKET_HEADER.size:
            raise AedatError(f"packet {packet}: truncated header at byte {pos}", offset=pos, packet=packet)
        etype, _src, esize, _tsoff, overflow, capacity, _number, _valid = PACKET_HEADER.unpack_from(buf, pos)
        if esize <= 0 or capacity < 0:
            raise AedatError(f"packet {packet}: invalid event size {esize} / capacity {capacity}",
                             offset=pos, packet=packet)
        start = pos + PACKET_HEADER.size
        end = start + esize * capacity
        if end > len(buf):
            raise AedatError(f"packet {packet}: payload needs {end - start} bytes, {len(buf) - start} available",
                             offset=pos, packet=packet)
        if etype == POLARITY_EVENT:
            if esize != POLARITY_SIZE:
                raise AedatError(f"packet {packet}: polarity event size {esize} != 8", offset=pos, packet=packet)
            words = np.frombuffer(buf, dtype="<u4", count=2 * capacity, offset=start).reshape(-1, 2)
            data, stamp = words[:, 0], words[:, 1].astype(np.int64)
            valid = (data & 1).astype(bool)
            x = (data >> 17) & 0x7FFF
            y = (data >> 2) & 0x7FFF
            inside = (x < sensor_width) & (y < sensor_height)
            keep = valid & inside
            dropped_invalid += int((~valid).sum())
            dropped_bounds += int((valid & ~inside).sum())
            xs.append(x[keep])
            ys.append(y[keep])
            ps.append(((data >> 1) & 1)[keep])
            ts.append((np.int64(overflow) << 31) | stamp[keep])
        else:
            skipped_packets += 1
        pos = end
        packet += 1

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    stream = EventStream(cat(xs, np.int32), cat(ys, np.int32), cat(ts, np.int64), cat(ps, np.int8),
                         sensor_width, sensor_height,
                         diagnostics={"packets": packet, "skipped_packets": skipped_packets,
                                      "dropped_invalid": dropped_invalid, "dropped_out_of_bounds": dropped_bounds})
    return stream.sorted()


@dataclass
class FrameStack:
    """Log-normalized event frames [T, 2, H, W] with values in [0, 1]."""

    frames: np.ndarray

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def train(self) -> SpikeTrain:
        """Single-sample continuous (non-binary) input train, B = 1."""
        return SpikeTrain([Tensor(f[None]) for f in self.frames], binary=False)


def bin_counts(stream: EventStream, T: int, out_h: int, out_w: int) -> np.ndarray:
    """Event counts [T, 2, out_h, out_w] with coordinates integer-divided down."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if stream.sensor_height % out_h or stream.sensor_width % out_w:
        raise ValueError(f"output {out_h}x{out_w} does not divide sensor "
                         f"{stream.sensor_height}x{stream.sensor_width} evenly")
    fy, fx = stream.sensor_height // out_h, stream.sensor_width // out_w
    counts = np.zeros((T, 2, out_h, out_w), dtype=np.int64)
    if len(stream) == 0:
        return counts
    rel = stream.t.astype(np.int64) - stream.start
    dur = stream.duration
    tb = np.zeros(len(rel), dtype=np.int64) if dur <= 0 else np.minimum((T * rel) // dur, T - 1)
    inside = (stream.x >= 0) & (stream.x < stream.sensor_width) & (stream.y >= 0) & (stream.y < stream.sensor_height)
    inside &= (tb >= 0)
    np.add.at(counts, (tb[inside], stream.p[inside].astype(np.int64), stream.y[inside] // fy,
                       stream.x[inside] // fx), 1)
    return counts


def log_normalize(counts: np.ndarray) -> np.ndarray:
    """``log(1 + f) / log(1 + f_max)``; all zeros when there are no events."""
    fmax = counts.max(initial=0)
    if fmax == 0:
        return np.zeros(counts.shape, dtype=np.float32)
    return (np.log1p(counts) / np.log1p(fmax)).astype(np.float32)


def bin_events(stream: EventStream, T: int, out_h: int, out_w: int) -> FrameStack:
    """Bin a recording into T equal-duration frames, then log-normalize per recording."""
    return FrameStack(log_normalize(bin_counts(stream, T, out_h, out_w)))


# --- IDX ---------------------------------------------------------------------

def load_idx(buf: bytes):
    """Decode an IDX file (gzip accepted).

    Image files give a Tensor [N, H, W] scaled to [0, 1]; label files give
    an int64 array.
    """
    if buf[:2] == b"\x1f\x8b":
        buf = gzip.decompress(buf)
    if len(buf) < 4:
        raise IdxError("file shorter than the magic number")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxError(f"header needs {head} bytes, got {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    expected = int(np.prod(dims))
    actual = len(buf) - head
    if actual != expected:
        raise IdxError(f"payload size mismatch: expected {expected} bytes, got {actual}")
    payload = np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)
    if magic == IDX_LABELS:
        return payload.astype(np.int64)
    return Tensor(payload.astype(np.float32) / 255.0)


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool the two trailing axes by ``factor``."""
    *lead, h, w = images.shape
    return images.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


# --- synthetic motion data ---------------------------------------------------

def synth_events(class_id: int, T: int = 16, H: int = 32, W: int = 32, seed: int = 0, n_dots: int = 40,
                 radius: float = 6.0, speed: float = 1.0, events_per_dot: float = 1.0,
                 noise_events: float = 0.0, frame_us: int = 1000) -> EventStream:
    """Event stream of a rigid random-dot patch drifting in one of four directions.

    Positions wrap around the sensor, so every frame taken alone is a
    uniformly placed patch regardless of class. All random draws are
    independent of ``class_id``: two classes with one seed differ only in
    the direction of motion.
    """
    if class_id not in DIRECTIONS:
        raise ValueError(f"class_id must be 0..3, got {class_id}")
    if T < 4:
        raise ValueError("synthetic gestures need T >= 4")
    rng = np.random.default_rng(seed)
    centre = rng.uniform(0, [W, H])
    ang = rng.uniform(0, 2 * np.pi, n_dots)
    rad = radius * np.sqrt(rng.uniform(0, 1, n_dots))
    offsets = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    dx, dy = DIRECTIONS[class_id]
    xs, ys, ts, ps = [], [], [], []
    for t in range(T):
        shift = speed * (t - (T - 1) / 2)
        pos = centre + offsets + shift * np.array([dx, dy])
        n = rng.poisson(events_per_dot, n_dots)
        px = np.repeat(np.floor(pos[:, 0]).astype(np.int64) % W, n)
        py = np.repeat(np.floor(pos[:, 1]).astype(np.int64) % H, n)
        m = rng.poisson(noise_events)
        px = np.concatenate([px, rng.integers(0, W, m)])
        py = np.concatenate([py, rng.integers(0, H, m)])
        k = len(px)
        xs.append(px)
        ys.append(py)
        ts.append(t * frame_us + rng.integers(0, frame_us, k))
        ps.append(rng.integers(0, 2, k))
    stream = EventStream(np.concatenate(xs).astype(np.int32), np.concatenate(ys).astype(np.int32),
                         np.concatenate(ts).astype(np.int64), np.concatenate(ps).astype(np.int8),
                         W, H, t_start=0, duration_us=T * frame_us)
    return stream.sorted()


def synth_gesture(class_id: int, T: int = 16, H: int = 32, W: int = 32, seed: int = 0, **kwargs) -> tuple[FrameStack, int]:
    """Binned, log-normalized motion sample and its label (0 up, 1 down, 2 left, 3 right)."""
    return bin_events(synth_events(class_id, T, H, W, seed, **kwargs), T, H, W), class_id
