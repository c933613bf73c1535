"""Event data model, synthetic stream generation, chunking and file I/O.

Streams are held column-wise in numpy arrays (``EventStream``) so that
100k-event sequences stay cheap; indexing with an integer yields a
``LabeledEvent`` and slicing yields another ``EventStream``.

Two on-disk formats are supported, selected by file extension:

* ``.csv``  -- header ``t_us,x,y,p,label``, one event per line.
* anything else (conventionally ``.evs``) -- binary "EVS1": magic, u16 width,
  u16 height, u64 count, then 16-byte little-endian records
  ``u64 t_us, u16 x, u16 y, i8 p, u8 label, 2 pad bytes``.

The CSV format has no place for the sensor geometry, so it is written as a
leading ``# width=W height=H`` comment line.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

MAGIC = b"EVS1"
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("label", "u1"), ("pad", "V2")]
)
assert RECORD_DTYPE.itemsize == 16
CSV_HEADER = "t_us,x,y,p,label"

_MASK64 = (1 << 64) - 1


class EventFormatError(ValueError):
    """Malformed event file. ``offset`` is a byte offset (binary) or line number (CSV)."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        for name in ("width", "height"):
            v = getattr(self, name)
            if not (0 < v <= 65535):
                raise ValueError(f"sensor {name} must be in [1, 65535], got {v}")


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class LabeledEvent:
    event: Event
    label: int = 0


def _col(a, dtype):
    return np.ascontiguousarray(np.asarray(a, dtype=dtype))


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered columns ``t`` (µs), ``x``, ``y``, ``p`` (±1) and ``label``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _col(self.t, np.uint64))
        object.__setattr__(self, "x", _col(self.x, np.uint16))
        object.__setattr__(self, "y", _col(self.y, np.uint16))
        object.__setattr__(self, "p", _col(self.p, np.int8))
        object.__setattr__(self, "label", _col(self.label, np.uint8))
        n = len(self.t)
        if any(len(c) != n for c in (self.x, self.y, self.p, self.label)):
            raise ValueError("event columns have different lengths")

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(*(np.zeros(0) for _ in range(5)))

    @classmethod
    def from_events(cls, events) -> "EventStream":
        rows = [(e.event.t, e.event.x, e.event.y, e.event.p, e.label) for e in events]
        if not rows:
            return cls.empty()
        t, x, y, p, lab = zip(*rows)
        return cls(t, x, y, p, lab)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            return LabeledEvent(
                Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i])),
                int(self.label[i]),
            )
        return EventStream(self.t[idx], self.x[idx], self.y[idx], self.p[idx], self.label[idx])

    def __iter__(self) -> Iterator[LabeledEvent]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, c), getattr(other, c))
            for c in ("t", "x", "y", "p", "label")
        )

    def with_labels(self, label) -> "EventStream":
        return EventStream(self.t, self.x, self.y, self.p, label)

    def validate(self, geometry: SensorGeometry) -> None:
        if len(self) and (self.x.max() >= geometry.width or self.y.max() >= geometry.height):
            raise ValueError("event coordinates outside sensor bounds")
        if np.any(np.diff(self.t.astype(np.int64)) < 0):
            raise ValueError("event timestamps are not non-decreasing")
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarity must be -1 or +1")

    @property
    def duration_s(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(int(self.t[-1]) - int(self.t[0])) * 1e-6

    def mean_rate(self) -> float:
        """Events per second over the stream's time span (0 for < 2 events)."""
        d = self.duration_s
        return len(self) / d if d > 0 else 0.0


def concat(streams) -> EventStream:
    streams = list(streams)
    if not streams:
        return EventStream.empty()
    return EventStream(*(np.concatenate([getattr(s, c) for s in streams]) for c in ("t", "x", "y", "p", "label")))


# ---------------------------------------------------------------------------
# PRNG: SplitMix64 seeding xoshiro256**.  Pure Python so the sequence is pinned
# by this file alone rather than by a numpy version.


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** generator, state filled from a SplitMix64 sequence."""

    def __init__(self, seed: int):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def exponential(self, rate: float) -> float:
        return -math.log1p(-self.random()) / rate

    def normal(self) -> float:
        # Box-Muller, one variate per call; 1 - u keeps the log argument in (0, 1].
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def below(self, n: int) -> int:
        return int(self.random() * n)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class Trajectory:
    start: tuple[float, float] = (0.0, 0.0)
    velocity: tuple[float, float] = (0.0, 0.0)  # px/s
    jitter: float = 0.0  # sinusoidal amplitude, px
    jitter_hz: float = 1.0

    def position(self, t_s: float) -> tuple[float, float]:
        x = self.start[0] + self.velocity[0] * t_s
        y = self.start[1] + self.velocity[1] * t_s
        if self.jitter:
            ph = 2.0 * math.pi * self.jitter_hz * t_s
            x += self.jitter * math.sin(ph)
            y += self.jitter * math.cos(ph)
        return x, y


@dataclass(frozen=True)
class GeneratorConfig:
    geometry: SensorGeometry
    duration: float
    background_rate: float = 0.0
    target_rate: float = 0.0
    trajectory: Trajectory = field(default_factory=Trajectory)
    target_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.background_rate < 0 or self.target_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.target_sigma < 0:
            raise ValueError("target_sigma must be >= 0")


def _poisson_times(rng: Xoshiro256, rate: float, duration: float) -> list[float]:
    out: list[float] = []
    if rate <= 0:
        return out
    t = rng.exponential(rate)
    while t < duration:
        out.append(t)
        t += rng.exponential(rate)
    return out


def generate_stream(cfg: GeneratorConfig) -> EventStream:
    """Background Poisson noise plus a labelled target moving along a trajectory.

    Target pixel offsets are Gaussian with ``target_sigma`` and truncated so that
    every target event lies within 4 sigma of the trajectory point at its
    timestamp (after clamping to the sensor).
    """
    geo = cfg.geometry
    rng = Xoshiro256(cfg.seed)
    rows: list[tuple[int, int, int, int, int, int]] = []  # (t_us, order, x, y, p, label)

    for t in _poisson_times(rng, cfg.background_rate, cfg.duration):
        x = rng.below(geo.width)
        y = rng.below(geo.height)
        p = 1 if rng.random() < 0.5 else -1
        rows.append((int(t * 1e6), len(rows), x, y, p, 0))

    sig = cfg.target_sigma
    for t in _poisson_times(rng, cfg.target_rate, cfg.duration):
        cx, cy = cfg.trajectory.position(t)
        px = _place(cx + sig * rng.normal(), cx, 4.0 * sig, geo.width)
        py = _place(cy + sig * rng.normal(), cy, 4.0 * sig, geo.height)
        p = 1 if rng.random() < 0.5 else -1
        rows.append((int(t * 1e6), len(rows), px, py, p, 1))

    rows.sort(key=lambda r: (r[0], r[1]))
    if not rows:
        return EventStream.empty()
    t, _, x, y, p, lab = zip(*rows)
    return EventStream(t, x, y, p, lab)


def _place(v: float, center: float, half: float, size: int) -> int:
    lo = max(0, math.ceil(center - half))
    hi = min(size - 1, math.floor(center + half))
    if lo > hi:  # trajectory left the sensor entirely; pin to nearest edge
        return min(max(int(round(center)), 0), size - 1)
    return min(max(int(round(v)), lo), hi)


def load_generator_config(path: Union[str, Path], **overrides) -> GeneratorConfig:
    """Read a ``key = value`` config file (``#`` starts a comment).

    Recognised keys: width, height, duration, background_rate, target_rate,
    start_x, start_y, velocity_x, velocity_y, jitter, jitter_hz, target_sigma,
    seed.  Keyword ``overrides`` take precedence over file values.
    """
    values = parse_kv(Path(path).read_text()) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return generator_config_from_mapping(values)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def generator_config_from_mapping(values) -> GeneratorConfig:
    known = {
        "width", "height", "duration", "background_rate", "target_rate", "start_x",
        "start_y", "velocity_x", "velocity_y", "jitter", "jitter_hz", "target_sigma", "seed",
    }
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown generator keys: {sorted(unknown)}")

    def f(key, default):
        return float(values.get(key, default))

    return GeneratorConfig(
        geometry=SensorGeometry(int(values.get("width", 64)), int(values.get("height", 64))),
        duration=f("duration", 1.0),
        background_rate=f("background_rate", 0.0),
        target_rate=f("target_rate", 0.0),
        trajectory=Trajectory(
            start=(f("start_x", 0.0), f("start_y", 0.0)),
            velocity=(f("velocity_x", 0.0), f("velocity_y", 0.0)),
            jitter=f("jitter", 0.0),
            jitter_hz=f("jitter_hz", 1.0),
        ),
        target_sigma=f("target_sigma", 1.0),
        seed=int(values.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Chunking


class StreamCursor:
    """Read position into a stream; one cursor per consumer."""

    def __init__(self, stream: EventStream, start: int = 0):
        self.stream = stream
        self.pos = start

    def take_chunk(self, s: int) -> EventStream:
        if s < 1:
            raise ValueError("step size must be >= 1")
        chunk = self.stream[self.pos : self.pos + s]
        self.pos += len(chunk)
        return chunk

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.stream)

    @property
    def remaining(self) -> int:
        return len(self.stream) - self.pos


def take_chunk(cursor: StreamCursor, s: int) -> EventStream:
    return cursor.take_chunk(s)


def iter_chunks(stream: EventStream, steps) -> Iterator[EventStream]:
    """Yield consecutive chunks using step sizes from ``steps`` (an int or an iterable)."""
    cursor = StreamCursor(stream)
    if isinstance(steps, int):
        while not cursor.exhausted:
            yield cursor.take_chunk(steps)
        return
    for s in steps:
        if cursor.exhausted:
            return
        yield cursor.take_chunk(s)


# ---------------------------------------------------------------------------
# File I/O


def _is_csv(path: Path) -> bool:
    return path.suffix.lower() == ".csv"


def write_events(path, geometry: SensorGeometry, stream: EventStream) -> None:
    path = Path(path)
    stream.validate(geometry)
    if _is_csv(path):
        with path.open("w", newline="\n") as fh:
            fh.write(f"# width={geometry.width} height={geometry.height}\n")
            fh.write(CSV_HEADER + "\n")
            for t, x, y, p, lab in zip(
                stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist(), stream.label.tolist()
            ):
                fh.write(f"{t},{x},{y},{p},{lab}\n")
        return
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"], rec["label"] = stream.t, stream.x, stream.y, stream.p, stream.label
    with path.open("wb") as fh:
        fh.write(HEADER.pack(MAGIC, geometry.width, geometry.height, len(stream)))
        fh.write(rec.tobytes())


def read_events(path) -> tuple[SensorGeometry, EventStream]:
    path = Path(path)
    if _is_csv(path):
        return _read_csv(path)
    return _read_binary(path.read_bytes())


def _read_binary(data: bytes) -> tuple[SensorGeometry, EventStream]:
    if len(data) < HEADER.size:
        raise EventFormatError("truncated header", len(data))
    magic, w, h, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    need = HEADER.size + count * RECORD_DTYPE.itemsize
    if len(data) < need:
        full = (len(data) - HEADER.size) // RECORD_DTYPE.itemsize
        raise EventFormatError(f"truncated record {full} of {count}", HEADER.size + full * RECORD_DTYPE.itemsize)
    if len(data) > need:
        raise EventFormatError("trailing bytes after last record", need)
    try:
        geo = SensorGeometry(w, h)
    except ValueError as exc:
        raise EventFormatError(str(exc), 4) from None
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
    bad = np.flatnonzero(np.diff(rec["t"].astype(np.int64)) < 0)
    if len(bad):
        raise EventFormatError("non-monotone timestamp", HEADER.size + int(bad[0] + 1) * RECORD_DTYPE.itemsize)
    stream = EventStream(rec["t"], rec["x"], rec["y"], rec["p"], rec["label"])
    _check_fields(stream, geo, lambda i: HEADER.size + i * RECORD_DTYPE.itemsize)
    return geo, stream


def _check_fields(stream: EventStream, geo: SensorGeometry, where) -> None:
    bad = np.flatnonzero((stream.x >= geo.width) | (stream.y >= geo.height) | ~np.isin(stream.p, (-1, 1)))
    if len(bad):
        raise EventFormatError("coordinate out of bounds or invalid polarity", where(int(bad[0])))


def _read_csv(path: Path) -> tuple[SensorGeometry, EventStream]:
    geo = None
    cols: list[list[int]] = [[], [], [], [], []]
    header_seen = False
    last_t = -1
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                kv = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
                if "width" in kv and "height" in kv:
                    try:
                        geo = SensorGeometry(int(kv["width"]), int(kv["height"]))
                    except ValueError as exc:
                        raise EventFormatError(str(exc), lineno) from None
                continue
            if not header_seen:
                if line.replace(" ", "") != CSV_HEADER:
                    raise EventFormatError(f"expected header {CSV_HEADER!r}", lineno)
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise EventFormatError("expected 5 fields", lineno)
            try:
                t, x, y, p, lab = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError("non-integer field", lineno) from None
            if t < last_t:
                raise EventFormatError("non-monotone timestamp", lineno)
            if t < 0 or x < 0 or y < 0 or p not in (-1, 1) or not 0 <= lab < 256:
                raise EventFormatError("field out of range", lineno)
            if geo is not None and (x >= geo.width or y >= geo.height):
                raise EventFormatError("coordinate out of bounds", lineno)
            last_t = t
            for c, v in zip(cols, (t, x, y, p, lab)):
                c.append(v)
    if not header_seen:
        raise EventFormatError("missing header", 0)
    stream = EventStream(*cols) if cols[0] else EventStream.empty()
    if geo is None:
        # no geometry comment: infer the tightest sensor covering the data
        geo = SensorGeometry(int(stream.x.max()) + 1 if len(stream) else 1, int(stream.y.max()) + 1 if len(stream) else 1)
    return geo, stream


def parse_csv_line(line: str) -> LabeledEvent:
    t, x, y, p, lab = (int(v) for v in line.strip().split(","))
    return LabeledEvent(Event(t, x, y, p), lab)
