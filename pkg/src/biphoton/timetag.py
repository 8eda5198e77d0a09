"""Detection-event data model and the TTAG binary file format.

A dataset is held column-wise (``trial``, ``channel``, ``t`` arrays) so that
files with 10^7-10^8 records load without per-record Python objects.

TTAG layout, little-endian::

    header (40 bytes)   magic b"TTAG" | version u16 = 1 | reserved u16 = 0 |
                        resolution_ps u64 | trial_length_units u64 |
                        trial_count u64 | record_count u64
    records (13 bytes)  trial u32 | channel u8 | t u64
    metadata (optional) u32 byte length | UTF-8 JSON object
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"TTAG"
VERSION = 1
HEADER = struct.Struct("<4sHHQQQQ")
HEADER_SIZE = HEADER.size  # 40
RECORD_DTYPE = np.dtype([("trial", "<u4"), ("channel", "u1"), ("t", "<u8")])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 13

DEFAULT_RESOLUTION_PS = 100
DEFAULT_TRIAL_LENGTH_UNITS = 10**7  # 1 ms at 100 ps


class TagFormatError(ValueError):
    """Base class for malformed or inconsistent TTAG data."""


class BadMagic(TagFormatError):
    pass


class UnsupportedVersion(TagFormatError):
    pass


class TruncatedFile(TagFormatError):
    pass


class BadChannel(TagFormatError):
    pass


class OutOfRange(TagFormatError):
    """Trial index or time outside the bounds declared in the header."""


class UnsortedRecords(TagFormatError):
    """Records not strictly increasing in (trial, t, channel)."""


class BadMetadata(TagFormatError):
    pass


class ResolutionMismatch(ValueError):
    pass


class DetectorChannel(enum.IntEnum):
    D1A = 0
    D1B = 1
    D2A = 2
    D2B = 3

    @property
    def field(self) -> int:
        return 1 if self < 2 else 2

    @property
    def arm(self) -> str:
        return "a" if self % 2 == 0 else "b"

    @property
    def label(self) -> str:
        return f"{self.field}{self.arm}"

    @classmethod
    def parse(cls, text) -> "DetectorChannel":
        """Accept ``"1a"``, ``"D1a"``, ``"d2b"``, an int 0-3 or a member."""
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        s = str(text).strip().lower()
        if s.startswith("d"):
            s = s[1:]
        for ch in cls:
            if ch.label == s:
                return ch
        raise ValueError(f"unknown detector channel {text!r}")


def _as_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim != 1:
        raise ValueError("record columns must be one-dimensional")
    return arr


@dataclass(eq=False)
class TagDataset:
    """Time-tagged detections from ``trial_count`` repetitions of a trial.

    Times are integers in units of ``resolution_ps`` measured from the start
    of the trial. Records are kept sorted by (trial, t, channel).
    """

    resolution_ps: int = DEFAULT_RESOLUTION_PS
    trial_length_units: int = DEFAULT_TRIAL_LENGTH_UNITS
    trial_count: int = 1
    trial: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    channel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trial = _as_array(self.trial, np.uint32)
        self.channel = _as_array(self.channel, np.uint8)
        self.t = _as_array(self.t, np.uint64)
        self.metadata = {str(k): str(v) for k, v in dict(self.metadata).items()}
        if not (self.trial.size == self.channel.size == self.t.size):
            raise ValueError("record columns differ in length")

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagDataset):
            return NotImplemented
        return (
            self.resolution_ps == other.resolution_ps
            and self.trial_length_units == other.trial_length_units
            and self.trial_count == other.trial_count
            and self.metadata == other.metadata
            and np.array_equal(self.trial, other.trial)
            and np.array_equal(self.channel, other.channel)
            and np.array_equal(self.t, other.t)
        )

    @property
    def resolution_s(self) -> float:
        return self.resolution_ps * 1e-12

    @property
    def trial_length_s(self) -> float:
        return self.trial_length_units * self.resolution_s

    @classmethod
    def from_unsorted(cls, trial, channel, t, **kwargs) -> "TagDataset":
        """Build a dataset from arbitrary-order records, sorting them."""
        trial = np.asarray(trial, dtype=np.uint32)
        channel = np.asarray(channel, dtype=np.uint8)
        t = np.asarray(t, dtype=np.uint64)
        order = np.lexsort((channel, t, trial))
        return cls(trial=trial[order], channel=channel[order], t=t[order], **kwargs)

    def channel_counts(self) -> np.ndarray:
        return np.bincount(self.channel, minlength=4)[:4]

    def select(self, channel) -> tuple[np.ndarray, np.ndarray]:
        """(trial, t) arrays for one channel, in stored order."""
        mask = self.channel == int(DetectorChannel.parse(channel))
        return self.trial[mask], self.t[mask]

    def validate(self) -> None:
        """Raise a :class:`TagFormatError` subclass if any invariant fails."""
        if self.resolution_ps <= 0 or self.trial_length_units <= 0 or self.trial_count <= 0:
            raise OutOfRange("resolution, trial length and trial count must be positive")
        if self.channel.size and self.channel.max() > 3:
            bad = int(np.flatnonzero(self.channel > 3)[0])
            raise BadChannel(f"record {bad}: channel byte {int(self.channel[bad])}")
        if self.trial.size and int(self.trial.max()) >= self.trial_count:
            bad = int(np.flatnonzero(self.trial >= self.trial_count)[0])
            raise OutOfRange(f"record {bad}: trial {int(self.trial[bad])} >= {self.trial_count}")
        if self.t.size and int(self.t.max()) >= self.trial_length_units:
            bad = int(np.flatnonzero(self.t >= self.trial_length_units)[0])
            raise OutOfRange(f"record {bad}: t {int(self.t[bad])} >= {self.trial_length_units}")
        bad = first_unsorted(self.trial, self.t, self.channel)
        if bad is not None:
            raise UnsortedRecords(f"record {bad} does not follow record {bad - 1} in (trial, t, channel) order")


def first_unsorted(trial, t, channel):
    """Index of the first record not strictly after its predecessor, or None."""
    if t.size < 2:
        return None
    dtr = np.diff(trial.astype(np.int64))
    dt = np.diff(t.astype(np.int64))
    dch = np.diff(channel.astype(np.int64))
    ok = (dtr > 0) | ((dtr == 0) & ((dt > 0) | ((dt == 0) & (dch > 0))))
    if ok.all():
        return None
    return int(np.argmin(ok)) + 1


def _records_bytes(ds: TagDataset) -> bytes:
    rec = np.empty(len(ds), dtype=RECORD_DTYPE)
    rec["trial"] = ds.trial
    rec["channel"] = ds.channel
    rec["t"] = ds.t
    return rec.tobytes()


def write_dataset(dataset: TagDataset, sink: BinaryIO) -> int:
    """Serialise ``dataset`` to ``sink``; returns the number of bytes written.

    Refuses (raises) rather than writing a dataset that violates an invariant.
    """
    dataset.validate()
    header = HEADER.pack(
        MAGIC, VERSION, 0,
        dataset.resolution_ps, dataset.trial_length_units,
        dataset.trial_count, len(dataset),
    )
    n = sink.write(header) or 0
    n += sink.write(_records_bytes(dataset)) or 0
    if dataset.metadata:
        blob = json.dumps(dataset.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        n += sink.write(struct.pack("<I", len(blob))) or 0
        n += sink.write(blob) or 0
    return n


def dumps(dataset: TagDataset) -> bytes:
    buf = io.BytesIO()
    write_dataset(dataset, buf)
    return buf.getvalue()


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if data is None or len(data) != n:
        got = 0 if data is None else len(data)
        raise TruncatedFile(f"{what}: expected {n} bytes, got {got}")
    return data


def _remaining(source):
    try:
        pos = source.tell()
        end = source.seek(0, io.SEEK_END)
        source.seek(pos)
    except (AttributeError, OSError, io.UnsupportedOperation):
        return None
    return end - pos


def read_dataset(source: BinaryIO) -> TagDataset:
    """Parse a TTAG stream, verifying every invariant; never repairs."""
    head = source.read(HEADER_SIZE)
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagic(f"bad magic {head[:4]!r}")
    if len(head) < HEADER_SIZE:
        raise TruncatedFile(f"header: expected {HEADER_SIZE} bytes, got {len(head)}")
    _, version, _reserved, res, tlen, ntrial, nrec = HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersion(f"format version {version} (supported: {VERSION})")
    remaining = _remaining(source)
    if remaining is not None and nrec * RECORD_SIZE > remaining:
        raise TruncatedFile(f"records: header declares {nrec}, file holds {remaining // RECORD_SIZE}")
    body = _read_exact(source, nrec * RECORD_SIZE, "records")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=nrec)
    metadata = {}
    tail = source.read(4)
    if tail:
        if len(tail) < 4:
            raise TruncatedFile("metadata length prefix cut short")
        (mlen,) = struct.unpack("<I", tail)
        blob = _read_exact(source, mlen, "metadata")
        try:
            metadata = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadMetadata(f"metadata is not UTF-8 JSON: {exc}") from None
        if not isinstance(metadata, dict):
            raise BadMetadata("metadata must be a JSON object")
        if source.read(1):
            raise BadMetadata("trailing bytes after metadata")
    ds = TagDataset(
        resolution_ps=res, trial_length_units=tlen, trial_count=ntrial,
        trial=rec["trial"], channel=rec["channel"], t=rec["t"], metadata=metadata,
    )
    ds.validate()
    return ds


def loads(data: bytes) -> TagDataset:
    return read_dataset(io.BytesIO(data))


def save(dataset: TagDataset, path) -> int:
    with open(path, "wb") as fh:
        return write_dataset(dataset, fh)


def load(path) -> TagDataset:
    with open(path, "rb") as fh:
        return read_dataset(fh)


def merge_datasets(a: TagDataset, b: TagDataset) -> TagDataset:
    """Append ``b``'s trials after ``a``'s; ``b``'s trial k becomes ``a.trial_count + k``."""
    if a.resolution_ps != b.resolution_ps:
        raise ResolutionMismatch(f"resolution {a.resolution_ps} ps vs {b.resolution_ps} ps")
    if a.trial_length_units != b.trial_length_units:
        raise ResolutionMismatch(
            f"trial length {a.trial_length_units} vs {b.trial_length_units} units")
    metadata = dict(b.metadata)
    metadata.update(a.metadata)
    # b's trials all follow a's, so concatenation is already sorted
    return TagDataset(
        resolution_ps=a.resolution_ps,
        trial_length_units=a.trial_length_units,
        trial_count=a.trial_count + b.trial_count,
        trial=np.concatenate([a.trial, b.trial.astype(np.uint64) + a.trial_count]).astype(np.uint32),
        channel=np.concatenate([a.channel, b.channel]),
        t=np.concatenate([a.t, b.t]),
        metadata=metadata,
    )


def concat_trials(parts, metadata: Mapping | None = None) -> TagDataset:
    """Merge a sequence of datasets in order (trial indices renumbered)."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if (p.resolution_ps, p.trial_length_units) != (first.resolution_ps, first.trial_length_units):
            raise ResolutionMismatch("datasets differ in resolution or trial length")
    offsets = np.cumsum([0] + [p.trial_count for p in parts[:-1]])
    trial = np.concatenate([p.trial.astype(np.uint64) + off for p, off in zip(parts, offsets)])
    return TagDataset(
        resolution_ps=first.resolution_ps,
        trial_length_units=first.trial_length_units,
        trial_count=int(sum(p.trial_count for p in parts)),
        trial=trial.astype(np.uint32),
        channel=np.concatenate([p.channel for p in parts]),
        t=np.concatenate([p.t for p in parts]),
        metadata=dict(metadata if metadata is not None else first.metadata),
    )


def summary(dataset: TagDataset) -> dict:
    counts = dataset.channel_counts()
    return {
        "resolution_ps": dataset.resolution_ps,
        "trial_length_units": dataset.trial_length_units,
        "trial_length_s": dataset.trial_length_s,
        "trial_count": dataset.trial_count,
        "record_count": len(dataset),
        "counts": {ch.label: int(counts[ch]) for ch in DetectorChannel},
        "metadata": dict(dataset.metadata),
    }
