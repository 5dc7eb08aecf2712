"""Time-tag data model: tag streams, binarization, folding and histograms.

Timestamps are integer picoseconds (the TDC resolution is 1 ps). All folding
is done either in float64 (exact to better than 1e-3 ps for tags below 2^45 ps)
or in 80-bit extended precision above that, so the accumulated modular error
stays under 1 ps across the whole int64 range.
"""

import csv
import enum
import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PCTS"
FORMAT_VERSION = 1
HEADER_SIZE = 16
RECORD_DTYPE = np.dtype([("t", "<u8"), ("channel", "u1")])

# Above this tag value (ps) fold() switches from float64 to extended precision;
# float64 modular error ~ t * 2^-52 crosses 0.01 ps near 2^45 ps (~35 s).
_FOLD_F64_LIMIT = 2**45

# Default histogram binning: 64 bins per period, never finer than 10 ps.
DEFAULT_BINS = 64
MIN_BIN_WIDTH_PS = 10.0


class TagStreamError(ValueError):
    """Invalid tag-stream content or arguments."""


class ParseError(TagStreamError):
    """Malformed tag file. Carries the offending byte offset or line number."""

    def __init__(self, message, byte_offset=None, line=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.byte_offset = byte_offset
        self.line = line


class Channel(enum.IntEnum):
    """Detector channel label attached to each tag."""

    Z0 = 0
    Z1 = 1
    X = 2
    UNKNOWN = 3

    @property
    def label(self) -> str:
        return _CHANNEL_LABELS[self]


_CHANNEL_LABELS = {
    Channel.Z0: "Z0",
    Channel.Z1: "Z1",
    Channel.X: "X",
    Channel.UNKNOWN: "Unknown",
}
_LABEL_TO_CHANNEL = {v: k for k, v in _CHANNEL_LABELS.items()}


@dataclass(frozen=True)
class TimeTag:
    """A single detection: integer picosecond timestamp plus channel label."""

    t_ps: int
    channel: Channel = Channel.UNKNOWN


@dataclass(frozen=True, eq=False)
class TagStream:
    """Ordered detection record: tag times (int64 ps), channels, duration, meta.

    Immutable after construction. Equality compares times, channels and
    duration; ``meta`` is annotation (provenance, warnings) and is ignored.
    """

    t: np.ndarray
    channel: np.ndarray
    duration_ps: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.int64)
        ch = np.ascontiguousarray(self.channel, dtype=np.uint8)
        if t.ndim != 1 or ch.shape != t.shape:
            raise TagStreamError("t and channel must be 1-d arrays of equal length")
        if t.size and t[0] < 0:
            raise TagStreamError("tag times must be non-negative")
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise TagStreamError("tag times must be sorted non-decreasing")
        duration = int(self.duration_ps)
        if duration < 0 or (t.size and duration < t[-1]):
            raise TagStreamError("duration_ps must cover the last tag")
        if np.any(ch > int(Channel.UNKNOWN)):
            raise TagStreamError("unknown channel code")
        t.flags.writeable = False
        ch.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "channel", ch)
        object.__setattr__(self, "duration_ps", duration)

    @classmethod
    def from_tags(cls, tags, duration_ps=None, meta=None):
        """Build a stream from an iterable of TimeTag (or (t, channel) pairs)."""
        pairs = [(int(tag[0]), int(tag[1])) if isinstance(tag, tuple) else
                 (int(tag.t_ps), int(tag.channel)) for tag in tags]
        t = np.array([p[0] for p in pairs], dtype=np.int64)
        ch = np.array([p[1] for p in pairs], dtype=np.uint8)
        if duration_ps is None:
            duration_ps = int(t[-1]) if t.size else 0
        return cls(t, ch, duration_ps, dict(meta or {}))

    def __len__(self) -> int:
        return int(self.t.size)

    def __getitem__(self, i) -> TimeTag:
        return TimeTag(int(self.t[i]), Channel(int(self.channel[i])))

    def __iter__(self):
        for t, ch in zip(self.t, self.channel):
            yield TimeTag(int(t), Channel(int(ch)))

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (self.duration_ps == other.duration_ps
                and self.t.shape == other.t.shape
                and bool(np.all(self.t == other.t))
                and bool(np.all(self.channel == other.channel)))

    def detection_rate(self) -> float:
        """Mean detection rate in Hz (0.0 for an empty zero-length stream)."""
        if self.duration_ps == 0:
            return 0.0
        return len(self) / (self.duration_ps * 1e-12)

    def window_indices(self, t_start_ps, t_end_ps):
        """(lo, hi) slice bounds of tags with t_start <= t < t_end."""
        lo = int(np.searchsorted(self.t, int(t_start_ps), side="left"))
        hi = int(np.searchsorted(self.t, int(t_end_ps), side="left"))
        return lo, hi

    def window(self, t_start_ps, t_end_ps) -> "TagStream":
        """Sub-stream of tags in [t_start, t_end); duration is the window end."""
        lo, hi = self.window_indices(t_start_ps, t_end_ps)
        return TagStream(self.t[lo:hi].copy(), self.channel[lo:hi].copy(),
                         int(t_end_ps), dict(self.meta))

    def shifted(self, offset_ps: int) -> "TagStream":
        """Stream with a constant offset added to every tag (and the duration)."""
        off = int(offset_ps)
        t = self.t + off
        if t.size and t[0] < 0:
            raise TagStreamError("shift would produce negative tag times")
        return TagStream(t, self.channel.copy(), self.duration_ps + max(off, 0),
                         dict(self.meta))


@dataclass(frozen=True)
class FoldedSet:
    """Tag residues (float64 ps) after folding at a demodulation frequency."""

    frequency_hz: float
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if not (self.frequency_hz > 0.0):
            raise TagStreamError("frequency must be positive")

    @property
    def period_ps(self) -> float:
        return 1e12 / self.frequency_hz

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Histogram:
    """Counts of folded residues over equal-width bins spanning one period."""

    edges: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bin_width_ps(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def is_empty(self) -> bool:
        return self.total == 0


def default_bin_count(period_ps: float) -> int:
    """64 bins per period, floored so the bin width never drops below 10 ps."""
    n = min(DEFAULT_BINS, int(period_ps // MIN_BIN_WIDTH_PS))
    return max(2, n)


def save_tags(stream: TagStream, path, fmt: str = "binary") -> None:
    """Write a stream to ``path`` as 'binary' or 'csv'.

    Binary layout (little endian): 16-byte header = magic ``PCTS`` (4 bytes),
    format version u16, stream duration u64 (ps), 2 zero bytes; then one
    9-byte record per tag: timestamp u64 (ps) followed by channel u8.
    """
    if len(stream) == 0:
        raise TagStreamError("refusing to save a stream with no tags")
    if fmt == "binary":
        header = MAGIC + np.uint16(FORMAT_VERSION).tobytes() \
            + np.uint64(stream.duration_ps).tobytes() + b"\x00\x00"
        records = np.empty(len(stream), dtype=RECORD_DTYPE)
        records["t"] = stream.t.astype(np.uint64)
        records["channel"] = stream.channel
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_ps", "channel"])
            for t, ch in zip(stream.t, stream.channel):
                writer.writerow([int(t), Channel(int(ch)).label])
    else:
        raise TagStreamError(f"unknown format {fmt!r}")


def load_tags(path, fmt: str = "binary") -> TagStream:
    """Read a tag file written by :func:`save_tags`.

    Unsorted input is sorted and flagged in ``meta['sorted_on_load']``.
    Truncated or malformed records raise :class:`ParseError` with the byte
    offset (binary) or line number (csv) of the problem.
    """
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "csv":
        return _load_csv(path)
    raise TagStreamError(f"unknown format {fmt!r}")


def _load_binary(path) -> TagStream:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise ParseError("file shorter than the 16-byte header", byte_offset=0)
    if blob[:4] != MAGIC:
        raise ParseError("bad magic, not a tag file", byte_offset=0)
    version = int(np.frombuffer(blob, dtype="<u2", count=1, offset=4)[0])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", byte_offset=4)
    duration = int(np.frombuffer(blob, dtype="<u8", count=1, offset=6)[0])
    body = len(blob) - HEADER_SIZE
    n_full, remainder = divmod(body, RECORD_DTYPE.itemsize)
    if remainder:
        raise ParseError("truncated record at end of file",
                         byte_offset=HEADER_SIZE + n_full * RECORD_DTYPE.itemsize)
    if n_full == 0:
        raise ParseError("file contains no tags", byte_offset=HEADER_SIZE)
    records = np.frombuffer(blob, dtype=RECORD_DTYPE, offset=HEADER_SIZE)
    t = records["t"].astype(np.int64)
    ch = records["channel"].copy()
    bad = np.nonzero(ch > int(Channel.UNKNOWN))[0]
    if bad.size:
        raise ParseError(f"invalid channel code {int(ch[bad[0]])}",
                         byte_offset=HEADER_SIZE + int(bad[0]) * RECORD_DTYPE.itemsize + 8)
    meta = {"source_path": os.fspath(path), "format": "binary"}
    t, ch, meta = _sort_if_needed(t, ch, meta)
    if duration < int(t[-1]):
        duration = int(t[-1])
        meta["duration_clamped"] = "true"
    return TagStream(t, ch, duration, meta)


def _load_csv(path) -> TagStream:
    times, chans = [], []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file contains no tags", line=1) from None
        if [c.strip() for c in header[:2]] != ["t_ps", "channel"]:
            raise ParseError("missing 't_ps,channel' header", line=1)
        for i, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError("expected two fields 't_ps,channel'", line=i)
            try:
                t = int(row[0])
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", line=i) from None
            label = row[1].strip()
            if label not in _LABEL_TO_CHANNEL:
                raise ParseError(f"bad channel label {label!r}", line=i)
            if t < 0:
                raise ParseError("negative timestamp", line=i)
            times.append(t)
            chans.append(int(_LABEL_TO_CHANNEL[label]))
    if not times:
        raise ParseError("file contains no tags", line=1)
    t = np.asarray(times, dtype=np.int64)
    ch = np.asarray(chans, dtype=np.uint8)
    meta = {"source_path": os.fspath(path), "format": "csv"}
    t, ch, meta = _sort_if_needed(t, ch, meta)
    return TagStream(t, ch, int(t[-1]), meta)


def _sort_if_needed(t, ch, meta):
    if t.size > 1 and np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t, ch = t[order], ch[order]
        meta["sorted_on_load"] = "true"
    return t, ch, meta


def binarize(stream: TagStream, sample_period_ps: int, window) -> np.ndarray:
    """Occupancy vector of a time window: element k is 1 iff at least one tag
    falls in [t_start + k*dt, t_start + (k+1)*dt).

    The window is (t_start_ps, t_end_ps), must lie inside the stream duration,
    and the vector length is ceil((t_end - t_start) / dt).
    """
    dt = int(sample_period_ps)
    if dt <= 0:
        raise TagStreamError("sample period must be a positive integer (ps)")
    t_start, t_end = int(window[0]), int(window[1])
    if t_start < 0 or t_end <= t_start:
        raise TagStreamError("window must satisfy 0 <= t_start < t_end")
    if t_end > stream.duration_ps:
        raise TagStreamError("window extends past the stream duration")
    n = (t_end - t_start + dt - 1) // dt
    out = np.zeros(n, dtype=np.uint8)
    lo, hi = stream.window_indices(t_start, t_end)
    if hi > lo:
        idx = (stream.t[lo:hi] - t_start) // dt
        out[idx] = 1
    return out


def fold(tags, frequency_hz: float, window=None) -> FoldedSet:
    """Fold tag times modulo the period of ``frequency_hz``.

    ``tags`` is a TagStream, a FoldedSet (idempotent re-fold), or an array of
    times. Residues are float64 ps in [0, period). Inputs below 2^45 ps are
    reduced in float64 (error < 0.01 ps); larger inputs use 80-bit extended
    precision (error <= t * 2^-64 < 0.5 ps over the int64 range).
    """
    f = float(frequency_hz)
    if not (f > 0.0) or not np.isfinite(f):
        raise TagStreamError("frequency must be positive and finite")
    if isinstance(tags, TagStream):
        if window is not None:
            lo, hi = tags.window_indices(int(window[0]), int(window[1]))
            t = tags.t[lo:hi]
        else:
            t = tags.t
    elif isinstance(tags, FoldedSet):
        t = tags.values
    else:
        t = np.asarray(tags)
        if window is not None:
            t = t[(t >= window[0]) & (t < window[1])]
    if t.size and np.min(t) < 0:
        raise TagStreamError("cannot fold negative times")
    big = t.size and float(np.max(t)) > _FOLD_F64_LIMIT
    work = np.longdouble if big else np.float64
    period = work(1e12) / work(f)
    values = np.mod(t.astype(work), period).astype(np.float64)
    # float rounding can land a residue exactly on the period; wrap it back
    p64 = float(period)
    values[values >= p64] -= p64
    return FoldedSet(f, values)


def histogram(folded: FoldedSet, n_bins=None) -> Histogram:
    """Equal-width histogram of folded residues over [0, period).

    An empty folded set yields an all-zero histogram (``is_empty`` is True).
    """
    period = folded.period_ps
    if n_bins is None:
        n_bins = default_bin_count(period)
    n_bins = int(n_bins)
    if n_bins < 2:
        raise TagStreamError("need at least 2 bins")
    edges = np.linspace(0.0, period, n_bins + 1)
    if len(folded) == 0:
        return Histogram(edges, np.zeros(n_bins, dtype=np.int64))
    idx = (folded.values * (n_bins / period)).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    return Histogram(edges, counts)
