import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtpe.tagio import (MAGIC, TagParseError, TagStream, dumps, format_channel_map, parse_channel_map, read_tags,
                          write_tags)

HEADER = {"rep_period_ps": "12500", "n_cycles": "10", "channel_map": "1:B,2:B,3:X,4:X"}


def roundtrip(stream):
    return read_tags(io.StringIO(dumps(stream)))


def test_empty_roundtrip():
    s = TagStream.empty(HEADER)
    assert roundtrip(s) == s


def test_roundtrip_keeps_extra_header_keys(tmp_path):
    s = TagStream.from_unsorted([3, 1, 2], [50, 10, 10], dict(HEADER, seed="7", note="x=y"))
    path = tmp_path / "t.tags"
    write_tags(s, path)
    back = read_tags(path)
    assert back == s
    assert back.header["note"] == "x=y"
    assert list(back) == [(1, 10), (2, 10), (3, 50)]


def test_large_roundtrip():
    rng = np.random.default_rng(1)
    t = np.sort(rng.integers(0, 10**12, 10**6))
    c = rng.integers(1, 5, 10**6)
    s = TagStream.from_unsorted(c, t, HEADER)
    assert roundtrip(s) == s


def test_file_layout():
    s = TagStream([1], [42], HEADER)
    lines = dumps(s).splitlines()
    assert lines[0] == MAGIC
    assert lines[1:4] == ["# rep_period_ps=12500", "# n_cycles=10", "# channel_map=1:B,2:B,3:X,4:X"]
    assert lines[4:] == ["channel,time_ps", "1,42"]


def _file(records, header=HEADER):
    lines = [MAGIC] + [f"# {k}={v}" for k, v in header.items()] + ["channel,time_ps"] + records
    return io.StringIO("\n".join(lines) + "\n")


@pytest.mark.parametrize(
    "records, line",
    [
        (["1,10", "2,5"], 7),          # decreasing time
        (["1,10", "2,10", "1,10"], 8),  # tie broken by lower channel later
        (["1,10", "9,11"], 7),          # unknown channel
        (["1,10", "1,-3"], 7),          # negative time
        (["1,10", "1;11"], 7),          # malformed record
        (["1,10", "a,11"], 7),          # non-integer
    ],
)
def test_rejected_at_offending_line(records, line):
    with pytest.raises(TagParseError) as err:
        read_tags(_file(records))
    assert err.value.line == line


def test_header_errors():
    with pytest.raises(TagParseError) as err:
        read_tags(io.StringIO("channel,time_ps\n"))
    assert err.value.line == 1
    with pytest.raises(TagParseError):
        read_tags(_file([], {"rep_period_ps": "12500", "n_cycles": "1"}))
    with pytest.raises(TagParseError):
        read_tags(io.StringIO(MAGIC + "\n# rep_period_ps=12500\n# n_cycles=1\n# channel_map=1:B\n1,3\n"))


def test_write_rejects_unsorted_and_incomplete():
    with pytest.raises(ValueError):
        write_tags(TagStream([1, 1], [5, 3], HEADER), io.StringIO())
    with pytest.raises(ValueError):
        write_tags(TagStream([1], [5], {"n_cycles": "1"}), io.StringIO())


def test_channel_map_roundtrip():
    m = {4: "X", 1: "B", 2: "B", 3: "X"}
    assert parse_channel_map(format_channel_map(m)) == m


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 2**50)), max_size=200))
def test_roundtrip_property(tags):
    c = [x for x, _ in tags]
    t = [y for _, y in tags]
    s = TagStream.from_unsorted(c, t, HEADER)
    assert s.is_sorted()
    assert roundtrip(s) == s
