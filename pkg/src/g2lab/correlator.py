"""Normalized pairwise and auto correlation of binary trace sets.

The estimator works on bit-packed words: for each lag the shifted streams are
AND-ed and popcounted, so every tally is an exact 64-bit integer.  For lag l
(in bins) over a window of N bins the overlap region has V_l = N - |l| bins
per series and

    g2(l) = (V_l * M * C_l) / (K_i,l * K_j,l)

where C_l counts coincidences over the overlap, and K_i,l, K_j,l count the
events of each channel restricted to its side of the overlap.  Lags whose
denominator vanishes are reported as missing, never as 0 or infinity.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .core import Correlogram, EventTraceSet, _popcount

__all__ = ["LagRange", "correlate_pair", "autocorrelate", "correlate_all_pairs"]

_SERIES_CHUNK = 8192


@dataclass(frozen=True)
class LagRange:
    """Signed lag window in bin units, inclusive on both ends."""

    l_min: int
    l_max: int
    stride: int = 1

    def __post_init__(self):
        if self.l_min > self.l_max:
            raise ValueError(f"l_min {self.l_min} > l_max {self.l_max}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def symmetric(cls, half_width: int, stride: int = 1) -> "LagRange":
        return cls(-half_width, half_width, stride)

    def values(self) -> np.ndarray:
        return np.arange(self.l_min, self.l_max + 1, self.stride, dtype=np.int64)


def _shift_right(words: np.ndarray, lag: int, out: np.ndarray) -> np.ndarray:
    """Bit n of out = bit n + lag of words (lag >= 0), zero fill past the end."""
    w = words.shape[1]
    q, s = divmod(lag, 64)
    out[:] = 0
    if q >= w:
        return out
    if s == 0:
        out[:, : w - q] = words[:, q:]
    else:
        np.right_shift(words[:, q:], np.uint64(s), out=out[:, : w - q])
        if q + 1 < w:
            out[:, : w - q - 1] |= words[:, q + 1 :] << np.uint64(64 - s)
    return out


def _coincidences_chunk(
    wi: np.ndarray, wj: np.ndarray, lags: np.ndarray, scratch: np.ndarray
) -> np.ndarray:
    """Exact coincidence counts per lag for one block of series."""
    out = np.empty(lags.size, dtype=np.int64)
    for k, lag in enumerate(lags):
        if lag >= 0:
            shifted = _shift_right(wj, int(lag), scratch)
            np.bitwise_and(shifted, wi, out=shifted)
        else:
            shifted = _shift_right(wi, -int(lag), scratch)
            np.bitwise_and(shifted, wj, out=shifted)
        out[k] = _popcount(shifted).sum(dtype=np.int64)
    return out


def _chunk_ranges(m: int, chunk: int):
    return [(s, min(s + chunk, m)) for s in range(0, m, chunk)]


def correlate_pair(
    traces: EventTraceSet,
    i: int,
    j: int,
    lags: LagRange,
    kind: Optional[str] = None,
    workers: int = 1,
) -> Correlogram:
    """Correlate channels i and j of a trace set over a lag range.

    ``i == j`` is routed to :func:`autocorrelate`.  ``workers`` > 1 splits the
    series across a thread pool; tallies are integers, so the result is
    bit-identical for any worker count.
    """
    if i == j:
        return autocorrelate(traces, i, lags, workers=workers)
    return _correlate(traces, i, j, lags, kind or "raw", workers)


def autocorrelate(
    traces: EventTraceSet, i: int, lags: LagRange, workers: int = 1
) -> Correlogram:
    """Self-correlation of one channel; exposes the 1/(mu*T) zero-lag peak."""
    return _correlate(traces, i, i, lags, "autocorrelation", workers)


def _correlate(
    traces: EventTraceSet, i: int, j: int, lags: LagRange, kind: str, workers: int
) -> Correlogram:
    c = traces.channel_count
    for ch in (i, j):
        if not 0 <= ch < c:
            raise ValueError(f"channel {ch} out of range for {c} channels")
    n = traces.spec.window_bins
    m = traces.spec.series_count
    lag_values = lags.values()
    if lag_values.size and (abs(int(lag_values[0])) >= n or abs(int(lag_values[-1])) >= n):
        raise ValueError(f"lags must satisfy |l| < N = {n}")

    ranges = _chunk_ranges(m, _SERIES_CHUNK)

    def run_block(block) -> np.ndarray:
        total = np.zeros(lag_values.size, dtype=np.int64)
        scratch = None
        for s0, s1 in block:
            wi = traces.words(i)[s0:s1]
            wj = traces.words(j)[s0:s1] if j != i else wi
            if scratch is None or scratch.shape != wi.shape:
                scratch = np.empty_like(wi)
            total += _coincidences_chunk(wi, wj, lag_values, scratch)
        return total

    if workers > 1 and len(ranges) > 1:
        split = max(1, len(ranges) // workers)
        blocks = [ranges[k : k + split] for k in range(0, len(ranges), split)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            coincidences = sum(pool.map(run_block, blocks))
    else:
        coincidences = run_block(ranges)

    # Per-lag event counts over the overlap come from aggregated prefix sums.
    prefix_i = np.concatenate(([0], np.cumsum(traces.bin_totals(i))))
    prefix_j = prefix_i if j == i else np.concatenate(([0], np.cumsum(traces.bin_totals(j))))

    pos = np.maximum(lag_values, 0)
    neg = np.maximum(-lag_values, 0)
    ki = prefix_i[n - pos] - prefix_i[neg]
    kj = prefix_j[n - neg] - prefix_j[pos]
    valid = (n - np.abs(lag_values)) * m

    return Correlogram(
        lags=lag_values,
        coincidences=coincidences,
        ki=ki,
        kj=kj,
        valid_bins=valid,
        kind=kind,
        bin_width=traces.spec.bin_width,
        window_bins=n,
        series_count=m,
        channels=(i, j),
    )


def correlate_all_pairs(
    traces: EventTraceSet,
    lags: LagRange,
    kind: Optional[str] = None,
    workers: int = 1,
) -> Dict[Tuple[int, int], Correlogram]:
    """Cross-correlograms for every channel pair i < j, in deterministic order."""
    out: Dict[Tuple[int, int], Correlogram] = {}
    c = traces.channel_count
    for i in range(c):
        for j in range(i + 1, c):
            out[(i, j)] = correlate_pair(traces, i, j, lags, kind=kind, workers=workers)
    return out
