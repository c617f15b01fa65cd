"""Time-tag streams and their text file format.

File layout::

    # seqtpe-tags v1
    # rep_period_ps=12500
    # n_cycles=1000
    # channel_map=1:B,2:B,3:X,4:X
    # seed=7
    channel,time_ps
    1,1834
    3,2101

Records are sorted by time, ties by channel.  Header keys other than the
required ones are kept verbatim on a round trip.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = "# seqtpe-tags v1"
COLUMNS = "channel,time_ps"
REQUIRED_KEYS = ("rep_period_ps", "n_cycles", "channel_map")
DEFAULT_CHANNEL_MAP = "1:B,2:B,3:X,4:X"
HOM_CHANNEL_MAP = "1:OUT_C,2:OUT_D"


class TagParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TimeTag(NamedTuple):
    channel: int
    time: int


def parse_channel_map(text: str) -> dict:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        ch, _, label = item.partition(":")
        out[int(ch)] = label.strip()
    return out


def format_channel_map(mapping: dict) -> str:
    return ",".join(f"{ch}:{label}" for ch, label in sorted(mapping.items()))


@dataclass(eq=False)
class TagStream:
    """Sorted detector time tags with integer picosecond times."""

    channel: np.ndarray
    time: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channel = np.ascontiguousarray(self.channel, dtype=np.int64)
        self.time = np.ascontiguousarray(self.time, dtype=np.int64)
        if self.channel.shape != self.time.shape or self.channel.ndim != 1:
            raise ValueError("channel and time must be 1-D arrays of equal length")
        self.header = {str(k): str(v) for k, v in self.header.items()}

    @classmethod
    def from_unsorted(cls, channel, time, header=None) -> "TagStream":
        channel = np.asarray(channel, dtype=np.int64)
        time = np.asarray(time, dtype=np.int64)
        order = np.lexsort((channel, time))
        return cls(channel[order], time[order], header or {})

    @classmethod
    def empty(cls, header=None) -> "TagStream":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), header or {})

    def __len__(self):
        return len(self.time)

    def __iter__(self) -> Iterator[TimeTag]:
        for c, t in zip(self.channel.tolist(), self.time.tolist()):
            yield TimeTag(c, t)

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            np.array_equal(self.channel, other.channel)
            and np.array_equal(self.time, other.time)
            and self.header == other.header
        )

    @property
    def rep_period(self) -> int:
        return int(self.header["rep_period_ps"])

    @property
    def n_cycles(self) -> int:
        return int(self.header["n_cycles"])

    @property
    def channel_map(self) -> dict:
        return parse_channel_map(self.header.get("channel_map", DEFAULT_CHANNEL_MAP))

    def is_sorted(self) -> bool:
        if len(self) < 2:
            return True
        dt = np.diff(self.time)
        return bool(np.all((dt > 0) | ((dt == 0) & (np.diff(self.channel) >= 0))))

    def select(self, channels) -> "TagStream":
        mask = np.isin(self.channel, np.fromiter(channels, dtype=np.int64))
        return TagStream(self.channel[mask], self.time[mask], dict(self.header))


def write_tags(stream: TagStream, dest) -> None:
    """Write ``stream`` to a path or text file object."""
    if not stream.is_sorted():
        raise ValueError("stream must be sorted by time, then channel")
    header = dict(stream.header)
    for key in REQUIRED_KEYS:
        if key not in header:
            raise ValueError(f"stream header lacks required key {key!r}")
    lines = [MAGIC]
    for key in REQUIRED_KEYS:
        lines.append(f"# {key}={header.pop(key)}")
    for key, value in header.items():
        lines.append(f"# {key}={value}")
    lines.append(COLUMNS)
    body = "\n".join(f"{c},{t}" for c, t in zip(stream.channel.tolist(), stream.time.tolist()))
    text = "\n".join(lines) + "\n" + (body + "\n" if body else "")
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="\n") as fh:
            fh.write(text)
    else:
        dest.write(text)


def dumps(stream: TagStream) -> str:
    buf = io.StringIO()
    write_tags(stream, buf)
    return buf.getvalue()


def _scan_records(lines, first_lineno: int, known: set) -> tuple:
    channels = np.empty(len(lines), dtype=np.int64)
    times = np.empty(len(lines), dtype=np.int64)
    prev = None
    for i, raw in enumerate(lines):
        lineno = first_lineno + i
        parts = raw.strip().split(",")
        if len(parts) != 2:
            raise TagParseError(f"expected 'channel,time_ps', got {raw.strip()!r}", lineno)
        try:
            ch, t = int(parts[0]), int(parts[1])
        except ValueError:
            raise TagParseError(f"non-integer field in {raw.strip()!r}", lineno) from None
        if t < 0:
            raise TagParseError(f"negative time {t}", lineno)
        if ch not in known:
            raise TagParseError(f"unknown channel {ch}", lineno)
        if prev is not None and (t < prev[1] or (t == prev[1] and ch < prev[0])):
            raise TagParseError(f"record ({ch},{t}) out of order", lineno)
        prev = (ch, t)
        channels[i], times[i] = ch, t
    return channels, times


def read_tags(src) -> TagStream:
    """Parse a tag file from a path or text file object."""
    if isinstance(src, (str, os.PathLike)):
        with open(src, "r") as fh:
            text = fh.read()
    else:
        text = src.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise TagParseError(f"missing '{MAGIC}' header", 1)
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        key, sep, value = body.partition("=")
        if not sep or not key.strip():
            raise TagParseError(f"malformed header line {lines[i]!r}", i + 1)
        header[key.strip()] = value.strip()
        i += 1
    for key in REQUIRED_KEYS:
        if key not in header:
            raise TagParseError(f"header lacks required key {key!r}", i + 1)
    try:
        int(header["rep_period_ps"])
        int(header["n_cycles"])
        known = set(parse_channel_map(header["channel_map"]))
    except ValueError:
        raise TagParseError("malformed required header value", i) from None
    if i >= len(lines) or lines[i].strip() != COLUMNS:
        raise TagParseError(f"expected column line {COLUMNS!r}", i + 1)
    i += 1
    records = [ln for ln in lines[i:]]
    while records and not records[-1].strip():
        records.pop()
    first = i + 1
    if not records:
        return TagStream.empty(header)
    try:
        data = np.array([r.split(",") for r in records], dtype=np.int64)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ValueError
    except ValueError:
        channels, times = _scan_records(records, first, known)
        return TagStream(channels, times, header)
    channels, times = data[:, 0].copy(), data[:, 1].copy()
    bad = np.zeros(len(times), dtype=bool)
    bad |= times < 0
    bad |= ~np.isin(channels, np.fromiter(known, dtype=np.int64))
    if len(times) > 1:
        dt = np.diff(times)
        disorder = (dt < 0) | ((dt == 0) & (np.diff(channels) < 0))
        bad[1:] |= disorder
    if bad.any():
        # slow path pinpoints the first offending line with a precise message
        _scan_records(records, first, known)
    return TagStream(channels, times, header)
