"""Binary trace files and correlogram CSV files.

Trace file layout (little-endian):

    magic   4 bytes  "G2TR"
    version u16      currently 1
    channels u16
    N       u32      bins per series
    M       u32      series count
    T_fs    u64      bin width in femtoseconds
    payload channels * M * ceil(N/8) bytes, channel-major then series,
            each series bit-packed LSB first

Correlogram CSV header:

    lag_bins,lag_seconds,g2,coincidences,ki,kj,valid_bins,kind

Lags without statistics carry g2 = nan.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .core import BinSpec, Correlogram, EventTraceSet

__all__ = [
    "TraceFileError",
    "CorruptHeader",
    "VersionMismatch",
    "TruncatedPayload",
    "write_traces",
    "read_traces",
    "write_correlogram_csv",
    "read_correlogram_csv",
]

MAGIC = b"G2TR"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIQ")


class TraceFileError(Exception):
    """Base error for trace file problems."""


class CorruptHeader(TraceFileError):
    pass


class VersionMismatch(TraceFileError):
    pass


class TruncatedPayload(TraceFileError):
    pass


def write_traces(traces: EventTraceSet, path: Union[str, Path]) -> None:
    """Serialize a trace set; bin width is stored at femtosecond resolution."""
    spec = traces.spec
    t_fs = round(spec.bin_width * 1e15)
    if t_fs <= 0 or t_fs > 2**64 - 1:
        raise ValueError("bin_width not representable in femtoseconds as u64")
    header = _HEADER.pack(
        MAGIC, VERSION, traces.channel_count, spec.window_bins, spec.series_count, t_fs
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for c in range(traces.channel_count):
            fh.write(traces.packed_bytes(c).tobytes())


def read_traces(path: Union[str, Path]) -> EventTraceSet:
    """Read a trace set written by :func:`write_traces` or a compatible tool.

    Raises :class:`CorruptHeader`, :class:`VersionMismatch` or
    :class:`TruncatedPayload`; a bad file never yields a partial result.
    Padding bits beyond N in externally produced files are cleared.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptHeader(f"{path}: file shorter than the header")
    magic, version, channels, n, m, t_fs = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if channels < 1 or n < 2 or m < 1 or t_fs == 0:
        raise CorruptHeader(f"{path}: implausible header fields")
    nb = (n + 7) // 8
    expected = _HEADER.size + channels * m * nb
    if len(raw) < expected:
        raise TruncatedPayload(
            f"{path}: payload has {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}"
        )

    spec = BinSpec(bin_width=t_fs * 1e-15, window_bins=n, series_count=m)
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size, count=channels * m * nb)
    packed = payload.reshape(channels, m, nb).copy()
    tail_bits = n - 8 * (nb - 1)
    if tail_bits < 8:
        packed[:, :, -1] &= (1 << tail_bits) - 1
    wp = (n + 63) // 64
    words = np.zeros((channels, m, wp), dtype="<u8")
    words.view(np.uint8)[:, :, :nb] = packed
    return EventTraceSet(words, spec)


def write_correlogram_csv(corr: Correlogram, path: Union[str, Path]) -> None:
    """One row per lag; floats use shortest round-trip formatting."""
    g2 = corr.g2
    tau = corr.tau
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["lag_bins", "lag_seconds", "g2", "coincidences", "ki", "kj", "valid_bins", "kind"]
        )
        for k in range(corr.lags.size):
            writer.writerow(
                [
                    int(corr.lags[k]),
                    repr(float(tau[k])),
                    repr(float(g2[k])),
                    int(corr.coincidences[k]),
                    int(corr.ki[k]),
                    int(corr.kj[k]),
                    int(corr.valid_bins[k]),
                    corr.kind,
                ]
            )


def read_correlogram_csv(path: Union[str, Path], bin_width=None, window_bins=0, series_count=0,
                         channels=(0, 1)) -> Correlogram:
    """Load a correlogram CSV; binning metadata not stored in the file may be
    supplied by the caller (the lag grid and tallies are authoritative)."""
    lags, g2, co, ki, kj, vb = [], [], [], [], [], []
    kind = "raw"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        first_tau = None
        for row in reader:
            lags.append(int(row["lag_bins"]))
            g2.append(float(row["g2"]))
            co.append(int(row["coincidences"]))
            ki.append(int(row["ki"]))
            kj.append(int(row["kj"]))
            vb.append(int(row["valid_bins"]))
            kind = row["kind"]
            if first_tau is None and int(row["lag_bins"]) != 0:
                first_tau = float(row["lag_seconds"]) / int(row["lag_bins"])
    if bin_width is None:
        bin_width = first_tau if first_tau else 1.0
    explicit = kind == "corrected"
    return Correlogram(
        lags=np.asarray(lags),
        coincidences=np.asarray(co),
        ki=np.asarray(ki),
        kj=np.asarray(kj),
        valid_bins=np.asarray(vb),
        kind=kind,
        bin_width=bin_width,
        window_bins=window_bins,
        series_count=series_count,
        channels=tuple(channels),
        g2_values=np.asarray(g2, dtype=float) if explicit else None,
    )
