"""Binary trace files and correlogram CSVs: round trips and error taxonomy."""

import struct

import numpy as np
import pytest

import g2lab as g2
from g2lab.tracefile import (
    CorruptHeader,
    TruncatedPayload,
    VersionMismatch,
    read_correlogram_csv,
    read_traces,
    write_correlogram_csv,
    write_traces,
)


@pytest.fixture
def sample_traces():
    rng = np.random.default_rng(55)
    spec = g2.BinSpec(1e-9, 100, 7)  # 100 bins: 13 bytes, partial last byte
    dense = (rng.random((3, 7, 100)) < 0.15).astype(np.uint8)
    return g2.pack_traces(dense, spec), dense


class TestTraceFile:
    def test_round_trip(self, tmp_path, sample_traces):
        traces, dense = sample_traces
        path = tmp_path / "t.g2tr"
        write_traces(traces, path)
        back = read_traces(path)
        assert back.spec == traces.spec
        assert back.channel_count == 3
        assert np.array_equal(g2.unpack_traces(back), dense)

    def test_rewrite_byte_identical(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        a, b = tmp_path / "a.g2tr", tmp_path / "b.g2tr"
        write_traces(traces, a)
        write_traces(read_traces(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        path = tmp_path / "t.g2tr"
        write_traces(traces, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptHeader, match="magic"):
            read_traces(path)

    def test_version_mismatch(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        path = tmp_path / "t.g2tr"
        write_traces(traces, path)
        blob = bytearray(path.read_bytes())
        blob[4:6] = struct.pack("<H", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch, match="version 99"):
            read_traces(path)

    def test_truncated_payload(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        path = tmp_path / "t.g2tr"
        write_traces(traces, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(TruncatedPayload):
            read_traces(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "t.g2tr"
        path.write_bytes(b"G2TR\x01")
        with pytest.raises(CorruptHeader, match="shorter"):
            read_traces(path)

    def test_external_file_from_format_spec(self, tmp_path):
        """Byte-level fixture built straight from the documented layout."""
        n, m, channels = 12, 2, 2
        t_fs = 1_000_000  # 1 ns
        header = struct.pack("<4sHHIIQ", b"G2TR", 1, channels, n, m, t_fs)
        # channel 0, series 0: bins 0 and 9 -> bytes 0b00000001, 0b00000010
        # channel 0, series 1: bin 3        -> 0b00001000, 0b00000000
        # channel 1, series 0: bins 0..11   -> 0xff, 0x0f
        # channel 1, series 1: empty
        payload = bytes([0b1, 0b10, 0b1000, 0, 0xFF, 0x0F, 0, 0])
        path = tmp_path / "ext.g2tr"
        path.write_bytes(header + payload)
        tr = read_traces(path)
        assert tr.spec == g2.BinSpec(1e-9, 12, 2)
        assert np.nonzero(tr.dense(0)[0])[0].tolist() == [0, 9]
        assert np.nonzero(tr.dense(0)[1])[0].tolist() == [3]
        assert tr.dense(1)[0].sum() == 12
        assert tr.dense(1)[1].sum() == 0

    def test_external_dirty_padding_cleared(self, tmp_path):
        """Set bits beyond N in the last byte must not corrupt tallies."""
        n, m = 10, 1
        header = struct.pack("<4sHHIIQ", b"G2TR", 1, 1, n, m, 1_000_000)
        payload = bytes([0b1, 0b11111111])  # bits for bins 10..15 are padding
        path = tmp_path / "dirty.g2tr"
        path.write_bytes(header + payload)
        tr = read_traces(path)
        assert tr.counts(0) == 3  # bins 0, 8, 9 only
        corr = g2.autocorrelate(tr, 0, g2.LagRange(0, 0))
        assert corr.coincidences[0] == 3

    def test_ingested_correlates_like_in_memory(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        path = tmp_path / "t.g2tr"
        write_traces(traces, path)
        back = read_traces(path)
        lags = g2.LagRange(-9, 9)
        a = g2.correlate_pair(traces, 0, 1, lags)
        b = g2.correlate_pair(back, 0, 1, lags)
        assert np.array_equal(a.coincidences, b.coincidences)
        assert np.array_equal(a.ki, b.ki)


class TestCorrelogramCsv:
    def test_round_trip(self, tmp_path, sample_traces):
        traces, _ = sample_traces
        corr = g2.correlate_pair(traces, 0, 2, g2.LagRange(-5, 5))
        path = tmp_path / "c.csv"
        write_correlogram_csv(corr, path)
        header = path.read_text().splitlines()[0]
        assert header == "lag_bins,lag_seconds,g2,coincidences,ki,kj,valid_bins,kind"
        back = read_correlogram_csv(path)
        assert np.array_equal(back.lags, corr.lags)
        assert np.array_equal(back.coincidences, corr.coincidences)
        assert np.allclose(back.g2, corr.g2, equal_nan=True)
        assert back.bin_width == pytest.approx(corr.bin_width)
        assert back.kind == "raw"

    def test_missing_lags_written_as_nan(self, tmp_path):
        spec = g2.BinSpec(1e-9, 50, 1)
        dense = np.zeros((2, 1, 50), dtype=np.uint8)
        dense[0, 0, 5] = 1
        corr = g2.correlate_pair(g2.pack_traces(dense, spec), 0, 1, g2.LagRange(0, 0))
        path = tmp_path / "nan.csv"
        write_correlogram_csv(corr, path)
        assert "nan" in path.read_text()
