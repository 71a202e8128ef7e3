"""Core types: binning, geometry, bit-packed traces, correlogram merging."""

import numpy as np
import pytest

import g2lab as g2
from g2lab.core import Correlogram, empty_partial, merge_partial


class TestBinSpec:
    def test_valid(self):
        spec = g2.BinSpec(1e-9, 5000, 100)
        assert spec.window_duration == pytest.approx(5e-6)
        assert spec.packed_bytes == 625

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(bin_width=0.0, window_bins=10, series_count=1),
            dict(bin_width=-1e-9, window_bins=10, series_count=1),
            dict(bin_width=1e-9, window_bins=1, series_count=1),
            dict(bin_width=1e-9, window_bins=10, series_count=0),
            dict(bin_width=float("inf"), window_bins=10, series_count=1),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            g2.BinSpec(**kwargs)


class TestGeometry:
    def test_default_array(self):
        geom = g2.ArrayGeometry()
        assert geom.pixel_count == 16
        assert geom.baseline(0, 1) == pytest.approx(43e-6)
        assert geom.baseline(0, 4) == pytest.approx(30e-6)
        assert geom.baseline(0, 5) == pytest.approx(np.hypot(30e-6, 43e-6))
        assert geom.baseline(3, 3) == 0.0
        assert geom.wire_distance(7, 8) == 1
        # pixels one column apart: 30 um baseline, bond wires four slots apart
        assert geom.baseline(4, 8) == pytest.approx(30e-6)
        assert geom.wire_distance(4, 8) == 4

    def test_wire_order_must_be_permutation(self):
        with pytest.raises(ValueError):
            g2.ArrayGeometry(rows=2, cols=2, wire_order=(0, 1, 1, 2))

    def test_subset_layout(self):
        geom = g2.ArrayGeometry()
        layout = geom.subset([4, 8])
        assert layout.channel_count == 2
        assert layout.baseline(0, 1) == pytest.approx(30e-6)
        assert layout.wire_distance(0, 1) == 4
        assert layout.baseline_x(0, 1) == pytest.approx(30e-6)
        row = geom.subset([0, 4, 8])
        assert row.baseline_x(0, 2) == pytest.approx(60e-6)

    def test_layout_duplicate_wires_rejected(self):
        with pytest.raises(ValueError):
            g2.ChannelLayout(positions=((0, 0), (1e-6, 0)), wire_slots=(3, 3))


class TestPacking:
    def test_all_zero(self):
        spec = g2.BinSpec(1e-9, 64, 3)
        tr = g2.pack_traces(np.zeros((1, 3, 64), dtype=np.uint8), spec)
        assert tr.counts(0) == 0
        assert tr.series_counts(0).tolist() == [0, 0, 0]

    def test_alternating(self):
        spec = g2.BinSpec(1e-9, 64, 1)
        bits = np.tile([0, 1], 32).astype(np.uint8)
        tr = g2.pack_traces([bits], spec)
        assert tr.counts(0) == 32
        assert np.array_equal(tr.dense(0)[0], bits)

    def test_random_round_trip_bit_exact(self):
        rng = np.random.default_rng(1234)
        spec = g2.BinSpec(1e-9, 5000, 100)
        dense = (rng.random((2, 100, 5000)) < 0.01).astype(np.uint8)
        tr = g2.pack_traces(dense, spec)
        assert np.array_equal(g2.unpack_traces(tr), dense)

    def test_round_trip_awkward_lengths(self):
        rng = np.random.default_rng(5)
        for n in (2, 7, 8, 63, 64, 65, 127, 129):
            spec = g2.BinSpec(1e-9, n, 4)
            dense = (rng.random((1, 4, n)) < 0.2).astype(np.uint8)
            tr = g2.pack_traces(dense, spec)
            assert np.array_equal(tr.dense(0), dense[0]), f"N={n}"

    def test_length_mismatch_rejected(self):
        spec = g2.BinSpec(1e-9, 64, 1)
        with pytest.raises(ValueError, match="expected shape"):
            g2.pack_traces([np.zeros(63, dtype=np.uint8)], spec)

    def test_out_of_range_values_rejected(self):
        spec = g2.BinSpec(1e-9, 8, 1)
        with pytest.raises(ValueError, match="0 or 1"):
            g2.pack_traces([np.array([0, 1, 2, 0, 0, 0, 0, 0])], spec)

    def test_padding_bits_zero(self):
        spec = g2.BinSpec(1e-9, 70, 2)
        dense = np.ones((1, 2, 70), dtype=np.uint8)
        tr = g2.pack_traces(dense, spec)
        words = tr.words(0)
        # bits 70..127 of the second word must be clear
        assert int(words[0, 1]) == (1 << 6) - 1

    def test_immutability(self):
        spec = g2.BinSpec(1e-9, 16, 1)
        tr = g2.pack_traces(np.zeros((1, 1, 16), dtype=np.uint8), spec)
        with pytest.raises(ValueError):
            tr.words(0)[0, 0] = 1

    def test_select_series(self):
        rng = np.random.default_rng(2)
        spec = g2.BinSpec(1e-9, 100, 10)
        dense = (rng.random((1, 10, 100)) < 0.1).astype(np.uint8)
        tr = g2.pack_traces(dense, spec)
        sub = tr.select_series(3, 7)
        assert sub.spec.series_count == 4
        assert np.array_equal(sub.dense(0), dense[0, 3:7])

    def test_mean_rate(self):
        spec = g2.BinSpec(1e-9, 1000, 10)
        dense = np.zeros((1, 10, 1000), dtype=np.uint8)
        dense[0, :, ::100] = 1  # 10 events per 1 us series
        tr = g2.pack_traces(dense, spec)
        assert tr.mean_rate(0) == pytest.approx(1e7)


def _random_partial(rng, lags, channels=(0, 1), kind="raw"):
    n_lags = lags.size
    return Correlogram(
        lags=lags,
        coincidences=rng.integers(0, 50, n_lags),
        ki=rng.integers(1, 1000, n_lags),
        kj=rng.integers(1, 1000, n_lags),
        valid_bins=rng.integers(1000, 2000, n_lags),
        kind=kind,
        bin_width=1e-9,
        window_bins=100,
        series_count=10,
        channels=channels,
    )


class TestMergeMonoid:
    lags = np.arange(-5, 6)

    def test_identity(self):
        rng = np.random.default_rng(7)
        c = _random_partial(rng, self.lags)
        e = empty_partial(c)
        for merged in (merge_partial(c, e), merge_partial(e, c)):
            assert np.array_equal(merged.coincidences, c.coincidences)
            assert np.array_equal(merged.ki, c.ki)
            assert np.array_equal(merged.kj, c.kj)
            assert np.array_equal(merged.valid_bins, c.valid_bins)

    def test_commutative(self):
        rng = np.random.default_rng(8)
        a = _random_partial(rng, self.lags)
        b = _random_partial(rng, self.lags)
        ab, ba = merge_partial(a, b), merge_partial(b, a)
        assert np.array_equal(ab.coincidences, ba.coincidences)
        assert np.array_equal(ab.ki, ba.ki)
        assert np.array_equal(ab.kj, ba.kj)
        assert np.array_equal(ab.valid_bins, ba.valid_bins)

    def test_associative(self):
        rng = np.random.default_rng(9)
        a, b, c = (_random_partial(rng, self.lags) for _ in range(3))
        left = merge_partial(merge_partial(a, b), c)
        right = merge_partial(a, merge_partial(b, c))
        assert np.array_equal(left.coincidences, right.coincidences)
        assert np.array_equal(left.valid_bins, right.valid_bins)

    def test_mismatched_inputs_rejected(self):
        rng = np.random.default_rng(10)
        a = _random_partial(rng, self.lags)
        with pytest.raises(ValueError, match="kind"):
            merge_partial(a, _random_partial(rng, self.lags, kind="background"))
        with pytest.raises(ValueError, match="channel"):
            merge_partial(a, _random_partial(rng, self.lags, channels=(0, 2)))
        with pytest.raises(ValueError, match="lag"):
            merge_partial(a, _random_partial(rng, np.arange(-4, 7)))

    def test_corrected_refuses_merge(self):
        rng = np.random.default_rng(11)
        a = _random_partial(rng, self.lags)
        corrected = Correlogram(
            lags=a.lags,
            coincidences=a.coincidences,
            ki=a.ki,
            kj=a.kj,
            valid_bins=a.valid_bins,
            kind="corrected",
            bin_width=a.bin_width,
            window_bins=a.window_bins,
            series_count=a.series_count,
            channels=a.channels,
            g2_values=np.ones(a.lags.size),
        )
        with pytest.raises(ValueError, match="corrected"):
            merge_partial(corrected, corrected)


class TestCorrelogram:
    def test_g2_recomputable_from_tallies(self):
        rng = np.random.default_rng(12)
        c = _random_partial(rng, np.arange(-3, 4))
        expected = c.valid_bins * c.coincidences / (c.ki * c.kj)
        assert np.allclose(c.g2, expected)

    def test_zero_denominator_is_nan(self):
        c = Correlogram(
            lags=np.array([0]),
            coincidences=np.array([0]),
            ki=np.array([0]),
            kj=np.array([5]),
            valid_bins=np.array([100]),
            kind="raw",
            bin_width=1e-9,
            window_bins=10,
            series_count=10,
            channels=(0, 1),
        )
        assert np.isnan(c.g2[0])
        assert np.isnan(c.sigma_stat()[0])

    def test_low_statistics_flag(self):
        rng = np.random.default_rng(13)
        c = _random_partial(rng, np.arange(-3, 4))
        mask = c.low_statistics(min_coincidences=25)
        assert np.array_equal(mask, c.coincidences < 25)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            _random_partial(np.random.default_rng(0), np.arange(2), kind="bogus")
