"""Detector imperfection model for SPAD arrays.

Transforms ideal photon bins into realistic detector output in five stages:
photon detection efficiency, dark counts, non-paralyzable dead time,
afterpulsing, and the two electrical artifact channels seen on the data
lines: bond-wire crosstalk between channels with adjacent wires (spurious
bunching) and cable-reflection suppression between channels with distant
wires (a 2 ns anti-correlation dip with damped ringing).

Dead time is non-paralyzable: a candidate falling inside the dead window is
lost and does not extend the window.  Afterpulses are scheduled by accepted
photon or dark detections (never by other afterpulses) with total probability
``afterpulse_prob``, at a delay of one dead time plus an exponential with the
configured decay constant.

Crosstalk pulses are line artifacts, not avalanches: they trigger no dead
time and no afterpulses, and their per-detection probability is independent
of the photon flux.  Injected counts are suppressed inside the dead window of
the target channel so that the output bitstream keeps the exact dead-time
spacing guarantee.  Relative to the flat baseline, the injected excess of
the normalized zero-lag correlation scales as 1/(rate*T); the default
injection probability is calibrated to give an adjacent-wire peak of about
1.3 at T = 1 ns and a detected rate of 6 MHz.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .core import BinSpec, ChannelLayout, EventTraceSet, _as_layout
from .correlator import LagRange, correlate_all_pairs
from .sources import Incoherent, generate, rng_for

__all__ = [
    "CrosstalkModel",
    "SpadModel",
    "DetectionStats",
    "detect",
    "detect_with_stats",
    "measure_background",
    "incoherent_rate_for_detected",
]

_DET_STREAM = 2

# Calibrated so that two channels with adjacent bond wires show a background
# correlation peak near 1.3 at T = 1 ns and 6 MHz detected rate.
_DEFAULT_INJECTION_PROB = 1.1e-3


@dataclass(frozen=True)
class CrosstalkModel:
    """Electrical artifacts on the detector data lines.

    ``wire_injection_prob`` is the probability that one detection injects a
    spurious count into each channel whose bond wire is adjacent, jittered by
    a Gaussian of the given FWHM.  Channels with wire distance >= 2 instead
    suffer conditional deletion: the later count of a close pair is removed
    with probability ``cable_dip_depth`` times a window that is flat-topped
    over ``cable_dip_width`` and rings with the configured period and damping.
    """

    wire_injection_prob: float = _DEFAULT_INJECTION_PROB
    injection_jitter_fwhm: float = 320e-12
    cable_dip_depth: float = 0.15
    cable_dip_width: float = 2e-9
    cable_ring_period: float = 4e-9
    cable_ring_damping: float = 3e-9

    def __post_init__(self):
        if not 0 <= self.wire_injection_prob <= 1:
            raise ValueError("wire_injection_prob must lie in [0, 1]")
        if not 0 <= self.cable_dip_depth <= 1:
            raise ValueError("cable_dip_depth must lie in [0, 1]")
        for name in ("injection_jitter_fwhm", "cable_dip_width", "cable_ring_period", "cable_ring_damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SpadModel:
    """Detector imperfection parameters for one SPAD array."""

    pdp: float = 0.25
    dead_time: float = 13e-9
    afterpulse_prob: float = 0.07
    afterpulse_decay: float = 40e-9
    dark_rate: float = 7.0
    crosstalk: Optional[CrosstalkModel] = field(default_factory=CrosstalkModel)

    def __post_init__(self):
        if not 0 <= self.pdp <= 1:
            raise ValueError("pdp must lie in [0, 1]")
        if self.dead_time <= 0:
            raise ValueError("dead_time must be positive")
        if not 0 <= self.afterpulse_prob < 1:
            raise ValueError("afterpulse_prob must lie in [0, 1)")
        if self.afterpulse_decay <= 0:
            raise ValueError("afterpulse_decay must be positive")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be >= 0")

    @classmethod
    def ideal(cls) -> "SpadModel":
        """Pass-through detector: full efficiency, no noise, sub-bin dead time."""
        return cls(pdp=1.0, dead_time=1e-15, afterpulse_prob=0.0, dark_rate=0.0, crosstalk=None)

    def dead_bins(self, bin_width: float) -> int:
        """Minimum accepted spacing in bins (at least 1: bins are binary)."""
        return max(1, int(math.ceil(self.dead_time / bin_width - 1e-9)))

    def to_config(self) -> dict:
        cfg = {
            "pdp": self.pdp,
            "dead_time": self.dead_time,
            "afterpulse_prob": self.afterpulse_prob,
            "afterpulse_decay": self.afterpulse_decay,
            "dark_rate": self.dark_rate,
        }
        if self.crosstalk is not None:
            xt = self.crosstalk
            cfg["crosstalk"] = {
                "wire_injection_prob": xt.wire_injection_prob,
                "injection_jitter_fwhm": xt.injection_jitter_fwhm,
                "cable_dip_depth": xt.cable_dip_depth,
                "cable_dip_width": xt.cable_dip_width,
                "cable_ring_period": xt.cable_ring_period,
                "cable_ring_damping": xt.cable_ring_damping,
            }
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "SpadModel":
        body = dict(cfg)
        xt = body.pop("crosstalk", None)
        try:
            crosstalk = CrosstalkModel(**xt) if xt is not None else None
            return cls(crosstalk=crosstalk, **body)
        except TypeError as exc:
            raise ValueError(f"bad spad config: {exc}") from exc


@dataclass
class DetectionStats:
    """Event bookkeeping from one detect run."""

    ideal_events: int = 0
    pdp_survivors: int = 0
    dark_candidates: int = 0
    accepted_primaries: int = 0
    accepted_afterpulses: int = 0
    afterpulses_scheduled: int = 0
    deletions: int = 0
    injections_offered: int = 0
    injections_kept: int = 0

    def add(self, other: "DetectionStats"):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))


def detect(ideal: EventTraceSet, model: SpadModel, geometry=None, seed=0) -> EventTraceSet:
    """Apply the detector model to ideal photon bins."""
    traces, _ = detect_with_stats(ideal, model, geometry, seed)
    return traces


def detect_with_stats(
    ideal: EventTraceSet, model: SpadModel, geometry=None, seed=0
) -> Tuple[EventTraceSet, DetectionStats]:
    """Like :func:`detect` but also returns event bookkeeping."""
    layout = _as_layout(geometry) if geometry is not None else ideal.channel_geometry
    channels = ideal.channel_count
    if layout is not None and layout.channel_count != channels:
        raise ValueError(
            f"geometry has {layout.channel_count} channels, traces have {channels}"
        )
    crosstalk_active = (
        model.crosstalk is not None
        and channels > 1
        and (model.crosstalk.wire_injection_prob > 0 or model.crosstalk.cable_dip_depth > 0)
    )
    if crosstalk_active and layout is None:
        raise ValueError("crosstalk coupling requires a detector geometry")

    spec = ideal.spec
    n, m = spec.window_bins, spec.series_count
    t = spec.bin_width
    dead_bins = model.dead_bins(t)
    wp = (n + 63) // 64
    words = np.zeros((channels, m, wp), dtype="<u8")
    bytes_view = words.view(np.uint8)
    stats = DetectionStats()

    chunk = 256
    for ci, s0 in enumerate(range(0, m, chunk)):
        s1 = min(s0 + chunk, m)
        rng = rng_for(seed, _DET_STREAM, ci)
        chunk_bits, chunk_stats = _detect_chunk(
            ideal, model, layout, rng, s0, s1, dead_bins, crosstalk_active
        )
        stats.add(chunk_stats)
        for c in range(channels):
            packed = np.packbits(chunk_bits[c], axis=-1, bitorder="little")
            bytes_view[c, s0:s1, : packed.shape[1]] = packed
    return EventTraceSet(words, spec, layout), stats


def _detect_chunk(ideal, model, layout, rng, s0, s1, dead_bins, crosstalk_active):
    spec = ideal.spec
    n = spec.window_bins
    t = spec.bin_width
    m = s1 - s0
    channels = ideal.channel_count
    stats = DetectionStats()

    # stage 1+2: efficiency thinning and dark-count candidates, per channel
    cand_series = []
    cand_bins = []
    for c in range(channels):
        dense = ideal.dense(c, s0, s1)
        ser, bins = np.nonzero(dense)
        stats.ideal_events += ser.size
        if model.pdp < 1.0:
            keep = rng.random(ser.size) < model.pdp
            ser, bins = ser[keep], bins[keep]
        stats.pdp_survivors += ser.size
        lam = model.dark_rate * t * n
        if lam > 0:
            dark_counts = rng.poisson(lam, size=m)
            total_dark = int(dark_counts.sum())
            if total_dark:
                dser = np.repeat(np.arange(m), dark_counts)
                dbins = rng.integers(0, n, size=total_dark)
                ser = np.concatenate([ser, dser])
                bins = np.concatenate([bins, dbins])
            stats.dark_candidates += total_dark
        order = np.lexsort((bins, ser))
        cand_series.append(ser[order].astype(np.int64))
        cand_bins.append(bins[order].astype(np.int64))

    # stage 3+4: dead time and afterpulsing, sequential per (channel, series)
    acc_series = []
    acc_bins = []
    for c in range(channels):
        ser, bins = cand_series[c], cand_bins[c]
        u_ap = rng.random(ser.size) if model.afterpulse_prob > 0 else None
        delays = (
            model.dead_time + rng.exponential(model.afterpulse_decay, size=ser.size)
            if model.afterpulse_prob > 0
            else None
        )
        out_ser, out_bin, ch_stats = _dead_time_pass(
            ser, bins, m, n, dead_bins, model.afterpulse_prob, u_ap, delays, t
        )
        stats.accepted_primaries += ch_stats[0]
        stats.accepted_afterpulses += ch_stats[1]
        stats.afterpulses_scheduled += ch_stats[2]
        acc_series.append(out_ser)
        acc_bins.append(out_bin)

    if crosstalk_active:
        acc_series, acc_bins, inj_series, inj_bins = _apply_crosstalk(
            model.crosstalk, layout, rng, acc_series, acc_bins, n, t, dead_bins, stats
        )
    else:
        inj_series = [np.empty(0, dtype=np.int64)] * channels
        inj_bins = [np.empty(0, dtype=np.int64)] * channels

    bits = np.zeros((channels, m, n), dtype=np.uint8)
    for c in range(channels):
        bits[c, acc_series[c], acc_bins[c]] = 1
        bits[c, inj_series[c], inj_bins[c]] = 1
    return bits, stats


def _dead_time_pass(ser, bins, m, n, dead_bins, eps, u_ap, delays, t):
    """Greedy non-paralyzable dead-time pass with afterpulse scheduling."""
    out_ser = []
    out_bin = []
    primaries = afterpulses = scheduled = 0
    if ser.size == 0:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            (0, 0, 0),
        )
    bounds = np.searchsorted(ser, np.arange(m + 1))
    bins_list = bins
    for s in range(m):
        k, end = bounds[s], bounds[s + 1]
        if k == end:
            continue
        last = -dead_bins
        pending = []  # afterpulse bins, heap
        while k < end or pending:
            if pending and (k >= end or pending[0] <= bins_list[k]):
                b = heapq.heappop(pending)
                idx = -1
            else:
                b = bins_list[k]
                idx = k
                k += 1
            if b - last < dead_bins:
                continue
            last = b
            out_ser.append(s)
            out_bin.append(b)
            if idx >= 0:
                primaries += 1
                if eps > 0 and u_ap[idx] < eps:
                    scheduled += 1
                    ap_bin = b + int(delays[idx] / t)
                    if ap_bin < n:
                        heapq.heappush(pending, ap_bin)
            else:
                afterpulses += 1
    return (
        np.asarray(out_ser, dtype=np.int64),
        np.asarray(out_bin, dtype=np.int64),
        (primaries, afterpulses, scheduled),
    )


def _dip_deletion_prob(delta_bins: np.ndarray, t: float, xt: CrosstalkModel) -> np.ndarray:
    """Deletion probability for the later count of a pair at |delta| bins."""
    dt = np.abs(delta_bins).astype(float) * t
    half = 0.5 * xt.cable_dip_width
    tail = dt - half
    with np.errstate(over="ignore"):
        ring = -np.sin(2.0 * math.pi * tail / xt.cable_ring_period) * np.exp(
            -tail / xt.cable_ring_damping
        )
    d = np.where(dt <= half, np.cos(math.pi * dt / xt.cable_dip_width), ring)
    return xt.cable_dip_depth * np.clip(d, 0.0, None)


def _dip_cutoff_bins(xt: CrosstalkModel, t: float) -> int:
    reach = 0.5 * xt.cable_dip_width + 8.0 * xt.cable_ring_damping
    return max(1, int(math.ceil(reach / t)))


def _deletion_mask(targets, partners, include_equal, cutoff, t, xt, u):
    """True where a target event is deleted by an earlier partner event."""
    if targets.size == 0 or partners.size == 0:
        return np.zeros(targets.size, dtype=bool)
    survive = np.ones(targets.size)
    side = "right" if include_equal else "left"
    hi = np.searchsorted(partners, targets, side=side)
    slot = 0
    while True:
        idx = hi - 1 - slot
        ok = idx >= 0
        if not np.any(ok):
            break
        delta = np.full(targets.size, cutoff + 1, dtype=np.int64)
        delta[ok] = targets[ok] - partners[idx[ok]]
        within = ok & (delta <= cutoff)
        if not np.any(within):
            break
        probs = _dip_deletion_prob(delta[within], t, xt)
        survive[within] *= 1.0 - probs
        slot += 1
    return u >= survive


def _apply_crosstalk(xt, layout, rng, acc_series, acc_bins, n, t, dead_bins, stats):
    channels = len(acc_series)
    cutoff = _dip_cutoff_bins(xt, t)
    stride = n + max(cutoff, dead_bins) + 1
    glob = [acc_series[c] * stride + acc_bins[c] for c in range(channels)]

    # cable-reflection deletions between channels with distant bond wires;
    # decisions use the pre-deletion event sets of both channels (no cascade)
    delete = [np.zeros(g.size, dtype=bool) for g in glob]
    if xt.cable_dip_depth > 0:
        for a in range(channels):
            for b in range(a + 1, channels):
                if layout.wire_distance(a, b) < 2:
                    continue
                u_b = rng.random(glob[b].size)
                delete[b] |= _deletion_mask(glob[b], glob[a], True, cutoff, t, xt, u_b)
                u_a = rng.random(glob[a].size)
                delete[a] |= _deletion_mask(glob[a], glob[b], False, cutoff, t, xt, u_a)
        for c in range(channels):
            kept = ~delete[c]
            stats.deletions += int(delete[c].sum())
            acc_series[c] = acc_series[c][kept]
            acc_bins[c] = acc_bins[c][kept]
            glob[c] = glob[c][kept]

    # bond-wire injections into wire-adjacent channels, masked so the output
    # keeps the dead-time spacing of the target channel
    inj_series = [np.empty(0, dtype=np.int64) for _ in range(channels)]
    inj_bins = [np.empty(0, dtype=np.int64) for _ in range(channels)]
    if xt.wire_injection_prob > 0:
        sigma_bins = xt.injection_jitter_fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0))) / t
        cand: Dict[int, list] = {c: [] for c in range(channels)}
        for a in range(channels):
            neighbors = [b for b in range(channels) if b != a and layout.wire_distance(a, b) == 1]
            if not neighbors or acc_series[a].size == 0:
                continue
            for b in neighbors:
                fire = rng.random(acc_series[a].size) < xt.wire_injection_prob
                stats.injections_offered += int(fire.sum())
                if not np.any(fire):
                    continue
                jitter = np.rint(rng.standard_normal(int(fire.sum())) * sigma_bins).astype(np.int64)
                tb = acc_bins[a][fire] + jitter
                ts = acc_series[a][fire]
                ok = (tb >= 0) & (tb < n)
                cand[b].append(ts[ok] * stride + tb[ok])
        for b in range(channels):
            if not cand[b]:
                continue
            cands = np.sort(np.concatenate(cand[b]))
            kept = _mask_injections(cands, glob[b], dead_bins)
            stats.injections_kept += kept.size
            inj_series[b] = kept // stride
            inj_bins[b] = kept % stride
    return acc_series, acc_bins, inj_series, inj_bins


def _mask_injections(cands: np.ndarray, accepted: np.ndarray, dead_bins: int) -> np.ndarray:
    """Keep injected counts that respect dead-time spacing in the target channel."""
    kept = []
    pos = np.searchsorted(accepted, cands)
    last = None
    for k in range(cands.size):
        g = cands[k]
        left = accepted[pos[k] - 1] if pos[k] > 0 else None
        right = accepted[pos[k]] if pos[k] < accepted.size else None
        if left is not None and g - left < dead_bins:
            continue
        if right is not None and right - g < dead_bins:
            continue
        if last is not None and g - last < dead_bins:
            continue
        kept.append(g)
        last = g
    return np.asarray(kept, dtype=np.int64)


def measure_background(
    model: SpadModel,
    geometry,
    spec: BinSpec,
    rate: float,
    seed=0,
    lags: Optional[LagRange] = None,
    workers: int = 1,
):
    """Reference background correlograms for all channel pairs.

    Runs the detector on spatially uncorrelated broadband light at the given
    ideal photon rate and correlates every pair.  Wire-adjacent pairs show the
    injection peak, distant pairs the cable dip; with all artifacts disabled
    every pair is flat at 1 within statistics.
    """
    layout = _as_layout(geometry)
    if lags is None:
        lags = LagRange.symmetric(100)
    ideal = generate(Incoherent(rate), spec, layout, seed=_bg_seed(seed, 0))
    detected = detect(ideal, model, layout, seed=_bg_seed(seed, 1))
    return correlate_all_pairs(detected, lags, kind="background", workers=workers)


def _bg_seed(seed, tag):
    if isinstance(seed, tuple):
        return seed + (tag,)
    return (int(seed), tag)


def incoherent_rate_for_detected(model: SpadModel, target_rate: float, margin: float = 1.0) -> float:
    """Ideal photon rate that yields roughly ``target_rate`` detections.

    Inverts the non-paralyzable saturation law including the afterpulse
    multiplication:  detected = pdp*ideal*(1 - detected*dead_time)*(1+eps).
    Accurate to a few percent for target_rate*dead_time below about 0.3.
    """
    if model.pdp <= 0:
        raise ValueError("pdp must be positive to reach a target rate")
    busy = target_rate * model.dead_time
    if busy >= 1:
        raise ValueError("target rate beyond saturation limit 1/dead_time")
    primaries = target_rate / (1.0 + model.afterpulse_prob)
    return margin * primaries / (model.pdp * (1.0 - busy))
