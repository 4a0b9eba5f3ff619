import struct

import numpy as np
import pandas as pd
import pytest

from errors import BadMagic, BadVersion, ShapeMismatch, TruncatedPayload
from trace_io import (
    HEADER,
    AttentionTrace,
    read_sidecar,
    read_trace,
    sidecar_path,
    write_csv,
    write_json,
    write_trace,
)


def test_round_trip_is_bit_exact(tmp_path, rng):
    trace = AttentionTrace(rng.random((2, 3, 4, 5)).astype(np.float32))
    path = tmp_path / "run.sagt"
    write_trace(trace, path)
    assert path.stat().st_size == HEADER.size + 2 * 3 * 4 * 5 * 4
    assert read_trace(path).bit_equal(trace)


def test_header_layout(tmp_path):
    path = tmp_path / "t.sagt"
    write_trace(AttentionTrace(np.zeros((1, 2, 3, 4), dtype=np.float32)), path)
    assert struct.unpack("<4sIIIII", path.read_bytes()[:24]) == (b"SAGT", 1, 1, 2, 3, 4)


def test_zero_steps(tmp_path):
    path = tmp_path / "empty.sagt"
    write_trace(AttentionTrace(np.zeros((2, 2, 0, 8), dtype=np.float32)), path)
    back = read_trace(path)
    assert (back.layers, back.heads, back.steps, back.positions) == (2, 2, 0, 8)


def test_trace_must_be_four_dimensional():
    with pytest.raises(ShapeMismatch):
        AttentionTrace(np.zeros((2, 3, 4), dtype=np.float32))


def test_ragged_rows_are_zero_padded(tmp_path):
    rows = [[[np.array([1.0])]], [[np.array([0.25, 0.75])]], [[np.array([0.2, 0.3, 0.5])]]]
    trace = AttentionTrace.from_rows(rows, layers=1, heads=1)
    path = tmp_path / "ragged.sagt"
    write_trace(trace, path)
    back = read_trace(path)
    np.testing.assert_array_equal(back.row(0, 0, 0), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(back.row(0, 0, 2), [0.2, 0.3, 0.5])


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.sagt"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(BadMagic):
        read_trace(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v2.sagt"
    path.write_bytes(struct.pack("<4sIIIII", b"SAGT", 2, 1, 1, 1, 1) + bytes(4))
    with pytest.raises(BadVersion):
        read_trace(path)


@pytest.mark.parametrize("delta", [-1, 3])
def test_payload_size_must_match_header(tmp_path, delta):
    path = tmp_path / "short.sagt"
    write_trace(AttentionTrace(np.ones((1, 1, 2, 2), dtype=np.float32)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:delta] if delta < 0 else raw + bytes(delta))
    with pytest.raises(TruncatedPayload):
        read_trace(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "hdr.sagt"
    path.write_bytes(b"SAGT" + bytes(4))
    with pytest.raises(TruncatedPayload):
        read_trace(path)


def test_sidecar(tmp_path):
    path = tmp_path / "run.sagt"
    write_trace(AttentionTrace(np.zeros((1, 1, 1, 1), dtype=np.float32)), path, metadata={"seed": 7})
    assert sidecar_path(path).name == "run.meta.json"
    assert read_sidecar(path) == {"seed": 7}
    assert read_sidecar(tmp_path / "other.sagt") is None


def test_csv_float_format(tmp_path):
    path = tmp_path / "out.csv"
    write_csv([{"policy": "sage", "value": 0.123456789}], path)
    assert path.read_text().splitlines() == ["policy,value", "sage,0.123457"]


def test_csv_keeps_column_order(tmp_path):
    path = tmp_path / "cols.csv"
    write_csv(pd.DataFrame({"z": [1], "a": [2]}), path)
    assert path.read_text().splitlines()[0] == "z,a"


def test_json_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_json({"b": 1, "a": [1, 2]}, a)
    write_json({"a": [1, 2], "b": 1}, b)
    assert a.read_bytes() == b.read_bytes()
