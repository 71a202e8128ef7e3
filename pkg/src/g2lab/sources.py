"""Monte-Carlo generators for the photon statistics of different light states.

Every generator follows the same doubly stochastic recipe: synthesize a latent
relative intensity I(t) with ensemble mean 1, then draw at most one detection
per bin with probability rate * T * I(t).  Chaotic (thermal) light is built
from Gaussian-filtered complex noise so that the field correlation has a
Gaussian envelope of width set by the coherence time; spatially separated
channels receive fields mixed to the visibility predicted for the configured
near-field profile.

Generation is deterministic: a given (config, seed) pair always produces a
bit-identical trace set.  Series are processed in fixed-size chunks, each
chunk drawing from its own seed substream, so chunks can also be generated
concurrently without changing the output.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

from .core import ArrayGeometry, BinSpec, ChannelLayout, EventTraceSet, _as_layout
from . import physics

__all__ = [
    "Coherent",
    "Incoherent",
    "MultimodeCoherent",
    "Thermal",
    "ModulatedThermal",
    "Mixture",
    "SpatialProfile",
    "SourceModel",
    "generate",
    "thermal_field_pair",
    "spatial_correlation_from_profile",
    "source_to_config",
    "source_from_config",
]

# rng stream tags; changing these changes every generated stream
_GEN_STREAM = 1
_MIX_STREAM = 3


@dataclass(frozen=True)
class SpatialProfile:
    """Near-field intensity profile seen by the detector plane.

    The profile is the main radial harmonic 1 + gamma*cos(Omega*x) over a
    source of transverse size ``near_field_width``, observed at ``distance``.
    The Fresnel parameter FN = w*x/(lambda*L) fixes the spatial coherence for
    a detector pair at baseline x.
    """

    near_field_width: float
    wavelength: float
    distance: float
    modulation_depth: float = 0.0
    spatial_freq: float = 0.0

    def __post_init__(self):
        if self.near_field_width <= 0 or self.wavelength <= 0 or self.distance <= 0:
            raise ValueError("near_field_width, wavelength and distance must be positive")
        if abs(self.modulation_depth) > 1:
            raise ValueError("modulation_depth must lie in [-1, 1]")
        if self.spatial_freq < 0:
            raise ValueError("spatial_freq must be >= 0")

    def fresnel_number(self, baseline: float) -> float:
        return self.near_field_width * baseline / (self.wavelength * self.distance)


@dataclass(frozen=True)
class Coherent:
    """Single-mode coherent state: flat g2 = 1."""

    rate: float

    def __post_init__(self):
        _check_rate(self.rate)


@dataclass(frozen=True)
class Incoherent:
    """Broadband incoherent light; indistinguishable from Poisson detections."""

    rate: float

    def __post_init__(self):
        _check_rate(self.rate)


@dataclass(frozen=True)
class MultimodeCoherent:
    """Laser with several longitudinal modes beating at the cavity roundtrip.

    The intensity carries a harmonic beat with a phase drawn fresh for every
    series, so no periodic signal survives in the mean intensity while the
    noise correlation oscillates as g2(tau) = 1 + a*cos(2*pi*tau/T_rt).
    """

    rate: float
    roundtrip_time: float = 1.4e-9
    beat_amplitude: float = 0.2

    def __post_init__(self):
        _check_rate(self.rate)
        if self.roundtrip_time <= 0:
            raise ValueError("roundtrip_time must be positive")
        if not 0 <= self.beat_amplitude <= 1:
            raise ValueError("beat_amplitude must lie in [0, 1]")

    @property
    def modulation_index(self) -> float:
        # g2 beat amplitude a maps to intensity modulation index sqrt(2a)
        return math.sqrt(2.0 * self.beat_amplitude)


@dataclass(frozen=True)
class Thermal:
    """Chaotic light with Gaussian field correlation envelope of width tau_c."""

    rate: float
    coherence_time: float
    polarized: bool = False
    spatial: Optional[SpatialProfile] = None

    def __post_init__(self):
        _check_rate(self.rate)
        if self.coherence_time <= 0:
            raise ValueError("coherence_time must be positive")


@dataclass(frozen=True)
class ModulatedThermal:
    """Discharge-lamp style source whose intensity is modulated in time.

    Waveforms: ``cosine`` gives I ~ 1 + m*cos(2*pi*f*t); ``rectified_sine``
    gives I ~ (1-m) + m*|sin(pi*f*t)|**k with configurable exponent k.  The
    fast chaotic fluctuations are assumed averaged out (large mode count), so
    only the slow modulation shapes g2.
    """

    rate: float
    mod_freq: float
    mod_depth: float = 1.0
    waveform: str = "cosine"
    waveform_exponent: float = 1.0

    def __post_init__(self):
        _check_rate(self.rate)
        if self.mod_freq <= 0:
            raise ValueError("mod_freq must be positive")
        if not 0 <= self.mod_depth <= 1:
            raise ValueError("mod_depth must lie in [0, 1]")
        if self.waveform not in ("cosine", "rectified_sine"):
            raise ValueError(f"unknown waveform {self.waveform!r}")
        if self.waveform_exponent <= 0:
            raise ValueError("waveform_exponent must be positive")


@dataclass(frozen=True)
class Mixture:
    """Superposition of mutually uncorrelated components.

    Each entry is (source, intensity_fraction); fractions must sum to 1.  The
    effective rate of a component is fraction * rate, with ``rate`` defaulting
    to the sum of the component rates.  Component streams are generated
    independently and interleaved (OR of the binary bins).
    """

    components: tuple
    rate: Optional[float] = None

    def __post_init__(self):
        comps = tuple((src, float(frac)) for src, frac in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        for _, frac in comps:
            if frac < 0:
                raise ValueError("intensity fractions must be >= 0")
        total_frac = sum(frac for _, frac in comps)
        if not math.isclose(total_frac, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"intensity fractions must sum to 1, got {total_frac}")

    @property
    def total_rate(self) -> float:
        if self.rate is not None:
            return self.rate
        return sum(src.rate for src, _ in self.components)


SourceModel = Union[Coherent, Incoherent, MultimodeCoherent, Thermal, ModulatedThermal, Mixture]


def _check_rate(rate: float):
    if not (rate > 0 and math.isfinite(rate)):
        raise ValueError(f"rate must be positive and finite, got {rate}")


def _seed_key(seed) -> tuple:
    if isinstance(seed, tuple):
        return seed
    return (int(seed),)


def rng_for(seed, *key) -> np.random.Generator:
    """Deterministic generator for a seed and a stream key."""
    root = _seed_key(seed)
    ss = np.random.SeedSequence(entropy=root[0], spawn_key=tuple(root[1:]) + tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def _series_chunk(n_field_inputs: int, window_bins: int) -> int:
    """Series per rng chunk; a pure function of the config, never of memory."""
    per_series = max(1, n_field_inputs) * max(window_bins, 1) * 16
    return int(min(256, max(1, 64_000_000 // per_series)))


def generate(
    source: SourceModel,
    spec: BinSpec,
    geometry=None,
    seed=0,
    *,
    channels: Optional[int] = None,
) -> EventTraceSet:
    """Generate ideal (pre-detector) photon bins for a light state.

    All channels observe the same beam: channels share the latent intensity
    unless a spatial profile plus geometry makes them partially correlated.
    Raises if the per-bin probability rate*T exceeds 0.5, where binarization
    would distort the statistics.
    """
    layout = _as_layout(geometry)
    if channels is None:
        channels = layout.channel_count if layout is not None else 2
    if layout is not None and channels != layout.channel_count:
        raise ValueError(
            f"channels={channels} does not match geometry with {layout.channel_count}"
        )
    rate = source.total_rate if isinstance(source, Mixture) else source.rate
    p_bin = rate * spec.bin_width
    if p_bin > 0.5:
        raise ValueError(
            f"per-bin probability rate*T = {p_bin:.3g} exceeds 0.5; "
            "reduce the rate or the bin width"
        )

    if isinstance(source, Mixture):
        return _generate_mixture(source, spec, layout, seed, channels)

    sampler = _make_sampler(source, spec, layout, channels)
    n, m = spec.window_bins, spec.series_count
    wp = (n + 63) // 64
    nbytes = spec.packed_bytes
    words = np.zeros((channels, m, wp), dtype="<u8")
    bytes_view = words.view(np.uint8)

    clipped = False
    chunk = _series_chunk(sampler.field_inputs, n)
    for ci, s0 in enumerate(range(0, m, chunk)):
        s1 = min(s0 + chunk, m)
        rng = rng_for(seed, _GEN_STREAM, ci)
        bits, clip = sampler.sample(rng, s1 - s0)
        clipped |= clip
        for c in range(channels):
            packed = np.packbits(bits[c], axis=-1, bitorder="little")
            bytes_view[c, s0:s1, : packed.shape[1]] = packed
    if clipped:
        warnings.warn(
            "instantaneous per-bin probability exceeded 0.5 and was clipped; "
            "bunching statistics may be distorted at this rate",
            RuntimeWarning,
            stacklevel=2,
        )
    return EventTraceSet(words, spec, layout)


def _generate_mixture(source, spec, layout, seed, channels) -> EventTraceSet:
    total = source.total_rate
    words = None
    out_layout = layout
    for idx, (comp, frac) in enumerate(source.components):
        eff = frac * total
        if eff == 0.0:
            continue
        comp_eff = replace(comp, rate=eff)
        sub = generate(
            comp_eff,
            spec,
            layout,
            seed=_seed_key(seed) + (_MIX_STREAM, idx),
            channels=channels,
        )
        if words is None:
            words = np.array(sub._words)
        else:
            np.bitwise_or(words, sub._words, out=words)
    if words is None:
        raise ValueError("mixture has zero total intensity")
    return EventTraceSet(words, spec, out_layout)


class _Sampler:
    """Chunk sampler: latent intensity plus Bernoulli thinning per channel."""

    def __init__(self, source, spec, channels, intensity_fn, field_inputs):
        self.source = source
        self.spec = spec
        self.channels = channels
        self.intensity_fn = intensity_fn
        self.field_inputs = field_inputs

    def sample(self, rng, m):
        n = self.spec.window_bins
        p0 = self.source.rate * self.spec.bin_width
        rel = self.intensity_fn(rng, m) if self.intensity_fn is not None else None
        clipped = False
        bits = np.empty((self.channels, m, n), dtype=np.uint8)
        for c in range(self.channels):
            if rel is None:
                p = p0
            else:
                p = p0 * (rel[c] if rel.ndim == 3 else rel)
                if np.any(p > 0.5):
                    clipped = True
                    p = np.minimum(p, 1.0)
            bits[c] = rng.random((m, n)) < p
        return bits, clipped


def _make_sampler(source, spec, layout, channels) -> _Sampler:
    n = spec.window_bins
    t = spec.bin_width

    if isinstance(source, (Coherent, Incoherent)):
        return _Sampler(source, spec, channels, None, 0)

    if isinstance(source, MultimodeCoherent):
        m_idx = source.modulation_index
        if m_idx > 1:
            warnings.warn(
                "beat_amplitude > 0.5 clips the intensity at zero; the cosine "
                "law g2 = 1 + a*cos is then only approximate",
                RuntimeWarning,
                stacklevel=3,
            )
        omega = 2.0 * math.pi * t / source.roundtrip_time
        grid = omega * np.arange(n)

        def beat(rng, m):
            phi = rng.uniform(0.0, 2.0 * math.pi, size=m)
            rel = 1.0 + m_idx * np.cos(grid[None, :] + phi[:, None])
            if m_idx > 1:
                np.maximum(rel, 0.0, out=rel)
            return rel

        return _Sampler(source, spec, channels, beat, 0)

    if isinstance(source, ModulatedThermal):
        if source.waveform == "cosine":
            omega = 2.0 * math.pi * source.mod_freq * t
            grid = omega * np.arange(n)
            depth = source.mod_depth

            def cosine(rng, m):
                phi = rng.uniform(0.0, 2.0 * math.pi, size=m)
                return 1.0 + depth * np.cos(grid[None, :] + phi[:, None])

            return _Sampler(source, spec, channels, cosine, 0)

        kappa = source.waveform_exponent
        depth = source.mod_depth
        mean_pow = _mean_abs_sin_power(kappa)
        norm = (1.0 - depth) + depth * mean_pow
        grid = math.pi * source.mod_freq * t * np.arange(n)

        def rectified(rng, m):
            phi = rng.uniform(0.0, math.pi, size=m)
            wave = np.abs(np.sin(grid[None, :] + phi[:, None])) ** kappa
            return ((1.0 - depth) + depth * wave) / norm

        return _Sampler(source, spec, channels, rectified, 0)

    if isinstance(source, Thermal):
        if source.coherence_time < 2.0 * t:
            warnings.warn(
                f"coherence_time {source.coherence_time:.3g} s is below twice the "
                f"bin width {t:.3g} s; the coherence peak is undersampled",
                UserWarning,
                stacklevel=3,
            )
        mixing = _mixing_matrix(source.spatial, layout, channels)
        pols = 1 if source.polarized else 2
        sigma_bins = source.coherence_time / (math.sqrt(2.0 * math.pi) * t)

        def thermal(rng, m):
            return _thermal_intensity(rng, mixing, m, n, sigma_bins, pols)

        return _Sampler(source, spec, channels, thermal, mixing.shape[1] * pols + channels)

    raise TypeError(f"unsupported source model {type(source).__name__}")


def _mean_abs_sin_power(kappa: float) -> float:
    from scipy.special import gamma as _gamma

    return _gamma((kappa + 1.0) / 2.0) / (math.sqrt(math.pi) * _gamma(kappa / 2.0 + 1.0))


def _mixing_matrix(spatial, layout, channels) -> np.ndarray:
    """Field mixing matrix L with L @ L.T equal to the channel visibility matrix."""
    if spatial is None:
        return np.ones((channels, 1))
    if layout is None:
        raise ValueError("a spatial profile requires a detector geometry")
    cov = np.empty((channels, channels))
    for a in range(channels):
        for b in range(channels):
            fn = spatial.fresnel_number(abs(layout.baseline_x(a, b)))
            cov[a, b] = physics.vcz_visibility(
                fn, spatial.modulation_depth, spatial.spatial_freq, spatial.near_field_width
            )
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def _gaussian_kernel(sigma_bins: float) -> np.ndarray:
    half = max(1, int(math.ceil(4.0 * sigma_bins)))
    u = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-0.5 * (u / sigma_bins) ** 2)
    return g / math.sqrt(np.sum(g * g))


def _filtered_complex_noise(rng, m: int, n: int, kernel: np.ndarray) -> np.ndarray:
    """Complex Gaussian process with unit variance and Gaussian autocorrelation."""
    pad = kernel.size - 1
    raw = rng.standard_normal((m, n + pad, 2)) * math.sqrt(0.5)
    noise = raw[..., 0] + 1j * raw[..., 1]
    return fftconvolve(noise, kernel[None, :], mode="valid", axes=-1)


def _thermal_intensity(rng, mixing, m, n, sigma_bins, polarizations) -> np.ndarray:
    """Relative intensity (channels, m, n) with ensemble mean 1."""
    kernel = _gaussian_kernel(sigma_bins)
    c, k = mixing.shape
    intensity = np.zeros((c, m, n))
    for _ in range(polarizations):
        fields = np.zeros((c, m, n), dtype=complex)
        for ki in range(k):
            xi = _filtered_complex_noise(rng, m, n, kernel)
            for ci in range(c):
                if mixing[ci, ki] != 0.0:
                    fields[ci] += mixing[ci, ki] * xi
        intensity += fields.real**2 + fields.imag**2
    intensity /= polarizations
    return intensity


def thermal_field_pair(
    coherence_time: float,
    spatial_correlation: float,
    spec: BinSpec,
    seed=0,
    polarized: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Two correlated chaotic intensity traces of shape (M, N), mean 1.

    The channel fields share a common component so that the field correlation
    equals ``spatial_correlation`` and the intensity correlation approaches
    1 + c**2 / p with p = 1 for polarized and p = 2 for unpolarized light.
    """
    c = float(spatial_correlation)
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"spatial_correlation must lie in [0, 1], got {c}")
    mixing = np.array(
        [
            [math.sqrt(c), math.sqrt(1.0 - c), 0.0],
            [math.sqrt(c), 0.0, math.sqrt(1.0 - c)],
        ]
    )
    pols = 1 if polarized else 2
    n, m = spec.window_bins, spec.series_count
    sigma_bins = coherence_time / (math.sqrt(2.0 * math.pi) * spec.bin_width)
    out = np.empty((2, m, n))
    chunk = _series_chunk(mixing.shape[1] * pols + 2, n)
    for ci, s0 in enumerate(range(0, m, chunk)):
        s1 = min(s0 + chunk, m)
        rng = rng_for(seed, _GEN_STREAM, ci)
        out[:, s0:s1] = _thermal_intensity(rng, mixing, s1 - s0, n, sigma_bins, pols)
    return out[0], out[1]


def spatial_correlation_from_profile(profile: SpatialProfile, baseline: float) -> float:
    """Zero-delay field correlation magnitude for a detector pair at ``baseline``."""
    if baseline < 0:
        raise ValueError("baseline must be >= 0")
    return abs(
        physics.vcz_visibility(
            profile.fresnel_number(baseline),
            profile.modulation_depth,
            profile.spatial_freq,
            profile.near_field_width,
        )
    )


# ---------------------------------------------------------------------------
# config serialization (key/value document with nested tables)

_SOURCE_KINDS = {
    "coherent": Coherent,
    "incoherent": Incoherent,
    "multimode_coherent": MultimodeCoherent,
    "thermal": Thermal,
    "modulated_thermal": ModulatedThermal,
    "mixture": Mixture,
}


def source_to_config(source: SourceModel) -> dict:
    """Plain-dict form of a source model, suitable for a TOML document."""
    if isinstance(source, Coherent):
        return {"kind": "coherent", "rate": source.rate}
    if isinstance(source, Incoherent):
        return {"kind": "incoherent", "rate": source.rate}
    if isinstance(source, MultimodeCoherent):
        return {
            "kind": "multimode_coherent",
            "rate": source.rate,
            "roundtrip_time": source.roundtrip_time,
            "beat_amplitude": source.beat_amplitude,
        }
    if isinstance(source, Thermal):
        cfg = {
            "kind": "thermal",
            "rate": source.rate,
            "coherence_time": source.coherence_time,
            "polarized": source.polarized,
        }
        if source.spatial is not None:
            sp = source.spatial
            cfg["spatial"] = {
                "near_field_width": sp.near_field_width,
                "wavelength": sp.wavelength,
                "distance": sp.distance,
                "modulation_depth": sp.modulation_depth,
                "spatial_freq": sp.spatial_freq,
            }
        return cfg
    if isinstance(source, ModulatedThermal):
        return {
            "kind": "modulated_thermal",
            "rate": source.rate,
            "mod_freq": source.mod_freq,
            "mod_depth": source.mod_depth,
            "waveform": source.waveform,
            "waveform_exponent": source.waveform_exponent,
        }
    if isinstance(source, Mixture):
        cfg = {
            "kind": "mixture",
            "components": [
                {"fraction": frac, "source": source_to_config(src)}
                for src, frac in source.components
            ],
        }
        if source.rate is not None:
            cfg["rate"] = source.rate
        return cfg
    raise TypeError(f"unsupported source model {type(source).__name__}")


def source_from_config(cfg: dict) -> SourceModel:
    """Inverse of :func:`source_to_config`; raises ValueError on bad schema."""
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError("source config must be a table with a 'kind' key")
    kind = cfg["kind"]
    if kind not in _SOURCE_KINDS:
        raise ValueError(f"unknown source kind {kind!r}")
    body = {k: v for k, v in cfg.items() if k != "kind"}
    try:
        if kind == "thermal" and "spatial" in body and body["spatial"] is not None:
            body["spatial"] = SpatialProfile(**body["spatial"])
        if kind == "mixture":
            comps = []
            for entry in body.pop("components"):
                comps.append((source_from_config(entry["source"]), entry["fraction"]))
            return Mixture(components=tuple(comps), **body)
        return _SOURCE_KINDS[kind](**body)
    except (TypeError, KeyError) as exc:
        raise ValueError(f"bad {kind} source config: {exc}") from exc
