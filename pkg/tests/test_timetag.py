import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biphoton import timetag as tt
from biphoton.timetag import DetectorChannel, TagDataset


def tiny():
    return TagDataset(resolution_ps=100, trial_length_units=1000, trial_count=2,
                      trial=[0, 0, 1], channel=[0, 3, 1], t=[5, 5, 999])


def test_header_and_record_sizes():
    assert tt.HEADER_SIZE == 40
    assert tt.RECORD_SIZE == 13
    empty = TagDataset(resolution_ps=100, trial_length_units=10, trial_count=1, trial=[], channel=[], t=[])
    assert len(tt.dumps(empty)) == 40
    one = TagDataset(resolution_ps=100, trial_length_units=10, trial_count=1, trial=[0], channel=[2], t=[3])
    assert len(tt.dumps(one)) == 53


def test_metadata_block_round_trip():
    ds = tiny()
    ds.metadata = {"b": "2", "a": "1"}
    blob = tt.dumps(ds)
    (n,) = struct.unpack("<I", blob[40 + 3 * 13:44 + 3 * 13])
    assert json.loads(blob[44 + 3 * 13:]) == {"a": "1", "b": "2"}
    assert n == len(blob) - 44 - 3 * 13
    assert tt.loads(blob) == ds


@st.composite
def datasets(draw):
    L = draw(st.integers(1, 10**9))
    trials = draw(st.integers(1, 50))
    n = draw(st.integers(0, 60))
    rows = draw(st.lists(st.tuples(st.integers(0, trials - 1), st.integers(0, 3), st.integers(0, L - 1)),
                         min_size=n, max_size=n, unique_by=lambda r: r))
    meta = draw(st.dictionaries(st.text(max_size=5), st.text(max_size=8), max_size=3))
    tr = [r[0] for r in rows]
    ch = [r[1] for r in rows]
    t = [r[2] for r in rows]
    return TagDataset.from_unsorted(tr, ch, t, resolution_ps=draw(st.sampled_from([1, 100, 250])),
                                    trial_length_units=L, trial_count=trials, metadata=meta)


@settings(max_examples=100, deadline=None)
@given(datasets())
def test_read_write_identity(ds):
    again = tt.loads(tt.dumps(ds))
    assert again == ds
    assert tt.dumps(again) == tt.dumps(ds)


def test_save_load(tmp_path):
    p = tmp_path / "x.ttag"
    n = tt.save(tiny(), p)
    assert p.stat().st_size == n
    assert tt.load(p) == tiny()


def _raw(resolution=100, L=1000, trials=2, records=((0, 0, 5),), version=1, magic=b"TTAG", nrec=None):
    rec = np.array(list(records), dtype=[("trial", "<u4"), ("channel", "u1"), ("t", "<u8")])
    n = len(rec) if nrec is None else nrec
    return tt.HEADER.pack(magic, version, 0, resolution, L, trials, n) + rec.tobytes()


@pytest.mark.parametrize("blob, err", [
    (b"NOPE" + b"\0" * 36, tt.BadMagic),
    (b"TT", tt.BadMagic),
    (_raw(version=2), tt.UnsupportedVersion),
    (_raw()[:20], tt.TruncatedFile),
    (_raw(nrec=5), tt.TruncatedFile),
    (_raw()[:-1], tt.TruncatedFile),
    (_raw(records=((0, 7, 5),)), tt.BadChannel),
    (_raw(records=((2, 0, 5),)), tt.OutOfRange),
    (_raw(records=((0, 0, 1000),)), tt.OutOfRange),
    (_raw(records=((0, 0, 6), (0, 0, 5))), tt.UnsortedRecords),
    (_raw(records=((0, 1, 5), (0, 0, 5))), tt.UnsortedRecords),
    (_raw(records=((0, 0, 5), (0, 0, 5))), tt.UnsortedRecords),
    (_raw() + struct.pack("<I", 3) + b"{x}", tt.BadMetadata),
    (_raw() + struct.pack("<I", 2) + b"[]", tt.BadMetadata),
    (_raw() + struct.pack("<I", 2) + b"{}" + b"z", tt.BadMetadata),
    (_raw() + struct.pack("<I", 10) + b"{}", tt.TruncatedFile),
])
def test_error_categories(blob, err):
    with pytest.raises(err):
        tt.loads(blob)


def test_errors_are_value_errors():
    assert issubclass(tt.TruncatedFile, tt.TagFormatError)
    assert issubclass(tt.TagFormatError, ValueError)


def test_unsorted_position_reported():
    with pytest.raises(tt.UnsortedRecords, match="record 2"):
        tt.loads(_raw(records=((0, 0, 1), (0, 0, 2), (0, 0, 1))))


def test_write_refuses_invalid():
    ds = TagDataset(resolution_ps=100, trial_length_units=10, trial_count=1, trial=[0], channel=[0], t=[10])
    with pytest.raises(tt.OutOfRange):
        tt.dumps(ds)


def test_from_unsorted_sorts_by_trial_time_channel():
    ds = TagDataset.from_unsorted([1, 0, 0, 0], [0, 2, 1, 0], [1, 4, 4, 9], resolution_ps=100,
                                  trial_length_units=10, trial_count=2)
    assert ds.trial.tolist() == [0, 0, 0, 1]
    assert ds.t.tolist() == [4, 4, 9, 1]
    assert ds.channel.tolist() == [1, 2, 0, 0]


def test_merge_offsets_trials():
    a, b = tiny(), tiny()
    m = tt.merge_datasets(a, b)
    assert m.trial_count == 4
    assert m.trial.tolist() == [0, 0, 1, 2, 2, 3]
    m.validate()


def test_merge_rejects_mismatch():
    a = tiny()
    b = TagDataset(resolution_ps=50, trial_length_units=1000, trial_count=1, trial=[], channel=[], t=[])
    with pytest.raises(tt.ResolutionMismatch):
        tt.merge_datasets(a, b)


def test_concat_matches_repeated_merge():
    parts = [tiny(), tiny(), tiny()]
    m = tt.merge_datasets(tt.merge_datasets(parts[0], parts[1]), parts[2])
    assert tt.concat_trials(parts) == m


def test_channel_labels():
    assert DetectorChannel.parse("1a") is DetectorChannel.D1A
    assert DetectorChannel.parse("D2B") is DetectorChannel.D2B
    assert DetectorChannel.parse(2) is DetectorChannel.D2A
    assert DetectorChannel.D1B.field == 1 and DetectorChannel.D1B.arm == "b"
    with pytest.raises(ValueError):
        DetectorChannel.parse("3a")


def test_summary_counts():
    s = tt.summary(tiny())
    assert s["record_count"] == 3
    assert s["counts"] == {"1a": 1, "1b": 1, "2a": 0, "2b": 1}


def test_read_from_nonseekable_stream():
    class Pipe(io.RawIOBase):
        def __init__(self, data):
            self.buf = io.BytesIO(data)

        def readable(self):
            return True

        def readinto(self, b):
            chunk = self.buf.read(len(b))
            b[:len(chunk)] = chunk
            return len(chunk)

        def seekable(self):
            return False

    assert tt.read_dataset(io.BufferedReader(Pipe(tt.dumps(tiny())))) == tiny()
