"""Shared domain types: binning geometry, detector-array layout, bit-packed
event traces and correlograms.

Traces are stored bit-packed, LSB first, 64 bins per machine word, so that
correlation kernels can run on whole words with bitwise AND and popcount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "BinSpec",
    "ArrayGeometry",
    "ChannelLayout",
    "EventTraceSet",
    "Correlogram",
    "CORRELOGRAM_KINDS",
    "pack_traces",
    "unpack_traces",
    "merge_partial",
]

CORRELOGRAM_KINDS = ("raw", "background", "corrected", "autocorrelation")


@dataclass(frozen=True)
class BinSpec:
    """Binning geometry of a measurement.

    Attributes
    ----------
    bin_width : float
        Temporal resolution T in seconds (one bin).
    window_bins : int
        Number of bins N per acquisition series.
    series_count : int
        Number of independent series M.
    """

    bin_width: float
    window_bins: int
    series_count: int

    def __post_init__(self):
        if not (math.isfinite(self.bin_width) and self.bin_width > 0):
            raise ValueError(f"bin_width must be positive and finite, got {self.bin_width}")
        if int(self.window_bins) != self.window_bins or self.window_bins < 2:
            raise ValueError(f"window_bins must be an integer >= 2, got {self.window_bins}")
        if int(self.series_count) != self.series_count or self.series_count < 1:
            raise ValueError(f"series_count must be an integer >= 1, got {self.series_count}")
        if not math.isfinite(self.window_bins * self.bin_width):
            raise ValueError("window duration N*T is not finite")

    @property
    def window_duration(self) -> float:
        """Duration of one series in seconds."""
        return self.window_bins * self.bin_width

    @property
    def packed_bytes(self) -> int:
        """Bytes needed to store one series bit-packed."""
        return (self.window_bins + 7) // 8


@dataclass(frozen=True)
class ChannelLayout:
    """Physical description of the channels actually present in a trace set.

    ``positions`` are (x, y) coordinates in meters, ``wire_slots`` the bond-wire
    positions of the corresponding data lines.  Electrical crosstalk couples
    channels whose wire slots differ by one.
    """

    positions: tuple
    wire_slots: tuple

    def __post_init__(self):
        if len(self.positions) != len(self.wire_slots):
            raise ValueError("positions and wire_slots must have the same length")
        if len(set(self.wire_slots)) != len(self.wire_slots):
            raise ValueError("wire_slots must be distinct")

    @property
    def channel_count(self) -> int:
        return len(self.positions)

    def baseline(self, i: int, j: int) -> float:
        """Euclidean separation of channels i and j in meters."""
        (xi, yi), (xj, yj) = self.positions[i], self.positions[j]
        return math.hypot(xi - xj, yi - yj)

    def baseline_x(self, i: int, j: int) -> float:
        """Separation along the x axis (signed), used for 1-D spatial coherence."""
        return self.positions[j][0] - self.positions[i][0]

    def wire_distance(self, i: int, j: int) -> int:
        return abs(self.wire_slots[i] - self.wire_slots[j])


@dataclass(frozen=True)
class ArrayGeometry:
    """Detector array geometry: grid shape, pixel pitches and bond-wire order.

    Pixels are numbered down the columns (index = column*rows + row), so two
    pixels whose indices differ by ``rows`` sit one horizontal pitch apart
    while their bond wires are ``rows`` slots apart.  ``wire_order`` maps
    pixel index to bond-wire position and must be a permutation of
    0..rows*cols-1; by default the wires follow the pixel numbering.
    """

    rows: int = 4
    cols: int = 4
    pitch_x: float = 30e-6
    pitch_y: float = 43e-6
    wire_order: Optional[tuple] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.pitch_x <= 0 or self.pitch_y <= 0:
            raise ValueError("pitches must be positive")
        n = self.rows * self.cols
        if self.wire_order is None:
            object.__setattr__(self, "wire_order", tuple(range(n)))
        else:
            object.__setattr__(self, "wire_order", tuple(self.wire_order))
        if sorted(self.wire_order) != list(range(n)):
            raise ValueError("wire_order must be a permutation of pixel indices")

    @property
    def pixel_count(self) -> int:
        return self.rows * self.cols

    def position(self, pixel: int) -> tuple:
        """(x, y) position of a pixel in meters."""
        c, r = divmod(pixel, self.rows)
        return (c * self.pitch_x, r * self.pitch_y)

    def baseline(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        (xi, yi), (xj, yj) = self.position(i), self.position(j)
        return math.hypot(xi - xj, yi - yj)

    def wire_distance(self, i: int, j: int) -> int:
        return abs(self.wire_order[i] - self.wire_order[j])

    def layout(self) -> ChannelLayout:
        """Layout covering every pixel of the array, channel k = pixel k."""
        n = self.pixel_count
        return ChannelLayout(
            positions=tuple(self.position(p) for p in range(n)),
            wire_slots=tuple(self.wire_order[p] for p in range(n)),
        )

    def subset(self, pixels: Sequence[int]) -> ChannelLayout:
        """Layout for a subset of pixels, e.g. the two detectors of one pair."""
        for p in pixels:
            if not 0 <= p < self.pixel_count:
                raise ValueError(f"pixel index {p} out of range")
        return ChannelLayout(
            positions=tuple(self.position(p) for p in pixels),
            wire_slots=tuple(self.wire_order[p] for p in pixels),
        )


GeometryLike = Union[ArrayGeometry, ChannelLayout]


def _as_layout(geometry) -> Optional[ChannelLayout]:
    if geometry is None:
        return None
    if isinstance(geometry, ArrayGeometry):
        return geometry.layout()
    if isinstance(geometry, ChannelLayout):
        return geometry
    raise TypeError(f"expected ArrayGeometry or ChannelLayout, got {type(geometry)!r}")


class EventTraceSet:
    """Per-channel, per-series binary detection bins, bit-packed.

    Immutable after construction; the packed words are read-only and can be
    shared freely across worker threads.  Padding bits beyond ``window_bins``
    are guaranteed zero, which correlation kernels rely on.
    """

    def __init__(self, words: np.ndarray, spec: BinSpec, channel_geometry=None):
        words = np.ascontiguousarray(words, dtype="<u8")
        if words.ndim != 3:
            raise ValueError("words must have shape (channels, series, words_per_series)")
        c, m, w = words.shape
        if m != spec.series_count:
            raise ValueError(f"series axis {m} does not match spec.series_count {spec.series_count}")
        if w != _words_per_series(spec.window_bins):
            raise ValueError("word axis does not match window_bins")
        layout = _as_layout(channel_geometry) if channel_geometry is not None else None
        if layout is not None and layout.channel_count != c:
            raise ValueError(
                f"geometry has {layout.channel_count} channels, traces have {c}"
            )
        words.flags.writeable = False
        self._words = words
        self.spec = spec
        self.channel_geometry = layout

    @property
    def channel_count(self) -> int:
        return self._words.shape[0]

    @property
    def words_per_series(self) -> int:
        return self._words.shape[2]

    def words(self, channel: int) -> np.ndarray:
        """Packed (series, words) view for one channel, LSB-first bit order."""
        return self._words[channel]

    def packed_bytes(self, channel: int) -> np.ndarray:
        """(series, ceil(N/8)) uint8 view matching the trace file payload."""
        nb = self.spec.packed_bytes
        return self._words[channel].view(np.uint8)[:, :nb]

    def dense(self, channel: int, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Unpacked 0/1 array of shape (series, window_bins) for one channel."""
        raw = self.packed_bytes(channel)[start:stop]
        return np.unpackbits(raw, axis=-1, count=self.spec.window_bins, bitorder="little")

    def counts(self, channel: int) -> int:
        """Total number of detections in one channel across all series."""
        return int(_popcount_sum(self._words[channel]))

    def series_counts(self, channel: int) -> np.ndarray:
        """Detections per series for one channel."""
        return _popcount(self._words[channel]).sum(axis=1, dtype=np.int64)

    def bin_totals(self, channel: int, chunk: int = 512) -> np.ndarray:
        """Number of detections per bin, summed over series (length N)."""
        n = self.spec.window_bins
        total = np.zeros(n, dtype=np.int64)
        for s0 in range(0, self.spec.series_count, chunk):
            total += self.dense(channel, s0, s0 + chunk).sum(axis=0, dtype=np.int64)
        return total

    def mean_rate(self, channel: int) -> float:
        """Mean detection rate of one channel in Hz."""
        n_bins = self.spec.window_bins * self.spec.series_count
        return self.counts(channel) / (n_bins * self.spec.bin_width)

    def select_series(self, start: int, stop: int) -> "EventTraceSet":
        """Trace set restricted to series [start, stop); shares storage."""
        m = self.spec.series_count
        if not (0 <= start < stop <= m):
            raise ValueError(f"invalid series range [{start}, {stop}) for M={m}")
        sub = replace(self.spec, series_count=stop - start)
        return EventTraceSet(self._words[:, start:stop], sub, self.channel_geometry)

    def same_bits(self, other: "EventTraceSet") -> bool:
        return (
            self.spec == other.spec
            and self.channel_count == other.channel_count
            and bool(np.array_equal(self._words, other._words))
        )


def _words_per_series(window_bins: int) -> int:
    return (window_bins + 63) // 64


if hasattr(np, "bitwise_count"):

    def _popcount(a: np.ndarray) -> np.ndarray:
        return np.bitwise_count(a)

else:  # numpy < 2.0
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(a: np.ndarray) -> np.ndarray:
        bytes_view = a.view(np.uint8).reshape(a.shape + (8,))
        return _POP8[bytes_view].sum(axis=-1, dtype=np.uint8)


def _popcount_sum(a: np.ndarray) -> int:
    return int(_popcount(a).sum(dtype=np.int64))


def pack_traces(dense_bins, spec: BinSpec, geometry=None) -> EventTraceSet:
    """Bit-pack per-channel 0/1 bin arrays into an EventTraceSet.

    ``dense_bins`` is an array of shape (channels, series, N), or a sequence of
    per-channel arrays of shape (series, N) or (N,).  Values must be 0 or 1.
    """
    if isinstance(dense_bins, np.ndarray) and dense_bins.ndim == 3:
        channels = [dense_bins[c] for c in range(dense_bins.shape[0])]
    else:
        channels = [np.asarray(a) for a in dense_bins]
    if not channels:
        raise ValueError("need at least one channel")

    n, m = spec.window_bins, spec.series_count
    wp = _words_per_series(n)
    words = np.zeros((len(channels), m, wp), dtype="<u8")
    for c, arr in enumerate(channels):
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape != (m, n):
            raise ValueError(
                f"channel {c}: expected shape ({m}, {n}), got {arr.shape}"
            )
        if arr.dtype != np.uint8:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"channel {c}: bin values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ValueError(f"channel {c}: bin values must be 0 or 1")
        packed = np.packbits(arr, axis=-1, bitorder="little")
        words[c].view(np.uint8)[:, : packed.shape[1]] = packed
    return EventTraceSet(words, spec, geometry)


def unpack_traces(traces: EventTraceSet) -> np.ndarray:
    """Inverse of pack_traces: (channels, series, N) uint8 array."""
    return np.stack([traces.dense(c) for c in range(traces.channel_count)])


@dataclass(frozen=True)
class Correlogram:
    """Normalized second-order correlation samples with their exact tallies.

    For estimator kinds (raw, background, autocorrelation) the g2 values are
    recomputed on demand from the integer tallies, so partial correlograms can
    be merged and audited.  Corrected correlograms carry explicit g2 values
    and propagated errors instead.
    """

    lags: np.ndarray
    coincidences: np.ndarray
    ki: np.ndarray
    kj: np.ndarray
    valid_bins: np.ndarray
    kind: str
    bin_width: float
    window_bins: int
    series_count: int
    channels: tuple
    g2_values: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in CORRELOGRAM_KINDS:
            raise ValueError(f"unknown correlogram kind {self.kind!r}")
        for name in ("lags", "coincidences", "ki", "kj", "valid_bins"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, arr)
            if arr.shape != self.lags.shape:
                raise ValueError(f"{name} shape mismatch")
        if self.g2_values is not None:
            object.__setattr__(self, "g2_values", np.asarray(self.g2_values, dtype=float))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))

    @property
    def tau(self) -> np.ndarray:
        """Physical lags in seconds."""
        return self.lags * self.bin_width

    @property
    def g2(self) -> np.ndarray:
        """g2 per lag; NaN where the denominator is zero (no statistics)."""
        if self.g2_values is not None:
            return self.g2_values
        denom = self.ki.astype(float) * self.kj.astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = self.valid_bins.astype(float) * self.coincidences.astype(float) / denom
        return np.where(denom > 0, vals, np.nan)

    def sigma_stat(self) -> np.ndarray:
        """Per-lag statistical error estimate assuming independent Poisson tallies."""
        if self.sigma is not None:
            return self.sigma
        g2 = self.g2
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.sqrt(
                1.0 / self.coincidences + 1.0 / self.ki + 1.0 / self.kj
            )
            vals = g2 * rel
        return np.where(self.coincidences > 0, vals, np.nan)

    def low_statistics(self, min_coincidences: int = 10) -> np.ndarray:
        """Boolean mask of lags whose tallies are too thin to trust."""
        return self.coincidences < min_coincidences

    def at_lag(self, lag: int) -> float:
        idx = np.nonzero(self.lags == lag)[0]
        if idx.size == 0:
            raise KeyError(f"lag {lag} not present")
        return float(self.g2[idx[0]])


def merge_partial(c1: Correlogram, c2: Correlogram) -> Correlogram:
    """Combine two partial correlograms over disjoint series sets.

    Tallies add component-wise; g2 is recomputed from the merged tallies.
    Only estimator kinds can be merged; corrected correlograms are derived
    quantities and refuse to merge.
    """
    if c1.kind != c2.kind:
        raise ValueError(f"kind mismatch: {c1.kind} vs {c2.kind}")
    if c1.kind == "corrected" or c1.g2_values is not None or c2.g2_values is not None:
        raise ValueError("corrected correlograms cannot be merged")
    if c1.channels != c2.channels:
        raise ValueError(f"channel pair mismatch: {c1.channels} vs {c2.channels}")
    if c1.bin_width != c2.bin_width or c1.window_bins != c2.window_bins:
        raise ValueError("binning mismatch")
    if not np.array_equal(c1.lags, c2.lags):
        raise ValueError("lag grids differ")
    return Correlogram(
        lags=c1.lags,
        coincidences=c1.coincidences + c2.coincidences,
        ki=c1.ki + c2.ki,
        kj=c1.kj + c2.kj,
        valid_bins=c1.valid_bins + c2.valid_bins,
        kind=c1.kind,
        bin_width=c1.bin_width,
        window_bins=c1.window_bins,
        series_count=c1.series_count + c2.series_count,
        channels=c1.channels,
    )


def empty_partial(like: Correlogram) -> Correlogram:
    """Identity element for merge_partial on the same lag grid."""
    zeros = np.zeros_like(like.lags)
    return Correlogram(
        lags=like.lags.copy(),
        coincidences=zeros.copy(),
        ki=zeros.copy(),
        kj=zeros.copy(),
        valid_bins=zeros.copy(),
        kind=like.kind,
        bin_width=like.bin_width,
        window_bins=like.window_bins,
        series_count=0,
        channels=like.channels,
    )
