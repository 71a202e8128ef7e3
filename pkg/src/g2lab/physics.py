"""Analytic coherence models, detector bias corrections and model fitting.

Closed forms used throughout (sinc(z) = sin(z)/z, argument in radians):

* single-mode chaotic light, polarized:
    g1(x, tau) = sinc(pi*theta*x/lambda) * exp(-pi*tau^2 / (2*tau_c^2))
    g2 = 1 + |g1|^2
* extended unpolarized chaotic source of width w at distance L, uniform
  near field, with FN = w*x/(lambda*L):
    g2(x, tau) = 1 + (1/2) * sinc^2(pi*FN) * exp(-pi*tau^2/tau_c^2)
* near field with a cosine radial harmonic I(x) ~ 1 + gamma*cos(Omega*x):
    the sinc is replaced by a three-term combination, see
    :func:`vcz_visibility`.

The spatial visibility is the normalized 1-D Fourier transform of the
near-field intensity along the detector baseline (Van Cittert-Zernike);
:func:`g2_vcz` evaluates it by adaptive quadrature for arbitrary profiles.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from .core import Correlogram

__all__ = [
    "LightStateModel",
    "table1_g1",
    "table1_g2",
    "AfterpulseProfile",
    "afterpulse_profile_from_tail",
    "correct_auto",
    "correct_cross",
    "mix_g2",
    "fresnel_number",
    "vcz_visibility",
    "g2_thermal_uniform",
    "g2_cosine_profile",
    "g2_vcz",
    "mode_count",
    "FitResult",
    "fit_near_field",
    "BeatFit",
    "fit_beat",
]


def _sinc(z):
    """sin(z)/z with the removable singularity at z = 0."""
    return np.sinc(np.asarray(z) / np.pi)


# ---------------------------------------------------------------------------
# reference correlation functions per light state


@dataclass(frozen=True)
class LightStateModel:
    """Parameters of a single-mode reference light state."""

    state: str
    angular_width: Optional[float] = None
    wavelength: Optional[float] = None
    coherence_time: Optional[float] = None

    _STATES = ("incoherent", "coherent", "thermal", "entangled")

    def __post_init__(self):
        if self.state not in self._STATES:
            raise ValueError(f"state must be one of {self._STATES}, got {self.state!r}")
        if self.state in ("thermal", "entangled"):
            for name in ("angular_width", "wavelength", "coherence_time"):
                val = getattr(self, name)
                if val is None or val <= 0:
                    raise ValueError(f"{self.state} state needs positive {name}")


def _thermal_g1(model: LightStateModel, baseline, tau):
    arg = math.pi * model.angular_width / model.wavelength * np.asarray(baseline, dtype=float)
    spatial = _sinc(arg)
    temporal = np.exp(-math.pi * np.asarray(tau, dtype=float) ** 2 / (2.0 * model.coherence_time**2))
    return spatial * temporal


def table1_g1(model: LightStateModel, baseline=0.0, tau=0.0):
    """First-order correlation for the reference states."""
    if model.state == "incoherent" or model.state == "entangled":
        return np.zeros_like(np.asarray(baseline, dtype=float) + np.asarray(tau, dtype=float))
    if model.state == "coherent":
        return np.ones_like(np.asarray(baseline, dtype=float) + np.asarray(tau, dtype=float))
    return _thermal_g1(model, baseline, tau)


def table1_g2(model: LightStateModel, baseline=0.0, tau=0.0):
    """Second-order correlation for the reference states.

    thermal: 1 + |g1|^2 (bunching peak g2(0) = 2); entangled: sinc^2 times a
    Gaussian with g2(0) = 1; incoherent and coherent are flat at 1.
    """
    shape = np.asarray(baseline, dtype=float) + np.asarray(tau, dtype=float)
    if model.state in ("incoherent", "coherent"):
        return np.ones_like(shape)
    g1 = _thermal_g1(model, baseline, tau)
    if model.state == "thermal":
        return 1.0 + g1 * g1
    return g1 * g1  # entangled


# ---------------------------------------------------------------------------
# detector bias corrections


@dataclass(frozen=True)
class AfterpulseProfile:
    """Afterpulse probability density recovered from a self-correlation tail."""

    taus: np.ndarray          # seconds, beyond the dead time
    density: np.ndarray       # p_A(tau), 1/s
    epsilon_hat: float        # integral of the density over the measured range
    decay_time: float         # fitted exponential decay constant, seconds
    amplitude: float          # fitted density at the start of the tail, 1/s


def afterpulse_profile_from_tail(
    taus: np.ndarray, g2_tail: np.ndarray, rate: float, afterpulse_prob: float
) -> AfterpulseProfile:
    """Invert the afterpulsing excess of a self-correlation tail.

    The excess of delayed self-coincidences beyond the dead time relates to
    the afterpulse density as  g2(tau) = 1 + p_A(tau) / ((1+eps)^2 * mu),
    so  p_A(tau) = (g2(tau) - 1) * (1+eps)^2 * mu.  The returned epsilon_hat
    integrates the density over the measured range (trapezoid) and should
    reproduce the configured overall afterpulse probability.
    """
    taus = np.asarray(taus, dtype=float)
    g2_tail = np.asarray(g2_tail, dtype=float)
    if taus.ndim != 1 or taus.size < 2 or taus.shape != g2_tail.shape:
        raise ValueError("need matching 1-D tau and g2 arrays with at least two lags")
    if not np.all(np.diff(taus) > 0):
        raise ValueError("taus must be strictly increasing")
    if rate <= 0:
        raise ValueError("rate must be positive")

    scale = (1.0 + afterpulse_prob) ** 2 * rate
    density = (g2_tail - 1.0) * scale
    eps_hat = float(np.trapezoid(density, taus))

    # exponential fit of the tail; moment-based start, then least squares
    pos = np.clip(density, 0.0, None)
    t0 = taus[0]
    if pos.sum() > 0:
        tau_guess = float(np.sum(pos * (taus - t0)) / np.sum(pos))
    else:
        tau_guess = (taus[-1] - t0) / 2.0
    tau_guess = max(tau_guess, (taus[1] - taus[0]) / 2.0)
    amp_guess = max(float(density[0]), 1e-12 * scale)

    def resid(p):
        amp, dec = p
        return amp * np.exp(-(taus - t0) / dec) - density

    sol = optimize.least_squares(
        resid,
        x0=[amp_guess, tau_guess],
        bounds=([0.0, 1e-3 * tau_guess], [np.inf, 1e3 * tau_guess]),
        x_scale=[max(amp_guess, 1e-30), tau_guess],
    )
    amp_fit, dec_fit = sol.x
    return AfterpulseProfile(
        taus=taus,
        density=density,
        epsilon_hat=eps_hat,
        decay_time=float(dec_fit),
        amplitude=float(amp_fit),
    )


def correct_auto(
    corr: Correlogram, rate: float, afterpulse_prob: float, dead_time: float
) -> AfterpulseProfile:
    """Afterpulse profile from a measured self-correlogram.

    Only lags beyond the dead time carry afterpulsing information; lags inside
    the dead band are rejected.  Positive lags are used (the self-correlogram
    is symmetric by construction).
    """
    tau = corr.tau
    keep = tau > dead_time
    if not np.any(keep):
        raise ValueError("no lags beyond the dead time; nothing to invert")
    g2 = corr.g2[keep]
    if np.any(~np.isfinite(g2)):
        raise ValueError("tail contains lags without statistics")
    return afterpulse_profile_from_tail(tau[keep], g2, rate, afterpulse_prob)


def correct_cross(
    measured: Correlogram, background: Correlogram, afterpulse_prob: float
) -> Correlogram:
    """Undo afterpulse dilution and spurious background correlations.

    corrected(tau) = 1 + (1+eps)^2 * (measured(tau) - background(tau)),
    with statistical errors of the two inputs propagated in quadrature.
    The returned correlogram keeps the measured tallies for auditing; its g2
    values are no longer a pure tally ratio, so it cannot be merged.
    """
    if measured.channels != background.channels:
        raise ValueError(
            f"channel pair mismatch: {measured.channels} vs {background.channels}"
        )
    if (
        measured.bin_width != background.bin_width
        or measured.window_bins != background.window_bins
    ):
        raise ValueError("binning mismatch between measurement and background")
    if not np.array_equal(measured.lags, background.lags):
        raise ValueError("lag-grid mismatch between measurement and background")

    boost = (1.0 + afterpulse_prob) ** 2
    g2c = 1.0 + boost * (measured.g2 - background.g2)
    np.clip(g2c, 0.0, None, out=g2c)
    sigma = boost * np.sqrt(measured.sigma_stat() ** 2 + background.sigma_stat() ** 2)
    return Correlogram(
        lags=measured.lags,
        coincidences=measured.coincidences,
        ki=measured.ki,
        kj=measured.kj,
        valid_bins=measured.valid_bins,
        kind="corrected",
        bin_width=measured.bin_width,
        window_bins=measured.window_bins,
        series_count=measured.series_count,
        channels=measured.channels,
        g2_values=g2c,
        sigma=sigma,
    )


def mix_g2(components: Sequence[Tuple]):
    """g2 of a superposition of mutually uncorrelated components.

    ``components`` holds (g2_alpha, intensity_i, intensity_j) triples; g2 may
    be a scalar or an array over lags.  The excess of each component is
    weighted by its intensity product relative to the total:

        g2 = 1 + sum_alpha (g2_alpha - 1) * Ii_a * Ij_a / (Ii_tot * Ij_tot)
    """
    if not components:
        raise ValueError("need at least one component")
    ii_tot = sum(float(c[1]) for c in components)
    jj_tot = sum(float(c[2]) for c in components)
    if ii_tot <= 0 or jj_tot <= 0:
        raise ValueError("total intensities must be positive")
    excess = 0.0
    for g2a, ii, jj in components:
        excess = excess + (np.asarray(g2a, dtype=float) - 1.0) * (ii * jj) / (ii_tot * jj_tot)
    return 1.0 + excess


# ---------------------------------------------------------------------------
# spatial coherence (Van Cittert-Zernike)


def fresnel_number(width: float, baseline: float, wavelength: float, distance: float) -> float:
    """Dimensionless baseline FN = w*x/(lambda*L)."""
    return width * baseline / (wavelength * distance)


def vcz_visibility(fn, gamma: float = 0.0, omega: float = 0.0, width: float = 1.0):
    """Signed field visibility of a cosine-modulated near field at parameter FN.

    Normalized Fourier transform of I(x) = 1 + gamma*cos(Omega*x) over a
    source of width w, evaluated at spatial frequency 2*pi*FN/w:

        [sinc(pi FN) + (gamma/2) sinc(pi FN + Omega w/2)
                     + (gamma/2) sinc(pi FN - Omega w/2)]
        / [1 + gamma sinc(Omega w/2)]

    gamma = 0 reduces to the uniform-source sinc for every FN.
    """
    fn = np.asarray(fn, dtype=float)
    half = 0.5 * omega * width
    num = _sinc(np.pi * fn)
    if gamma != 0.0:
        num = num + 0.5 * gamma * (_sinc(np.pi * fn + half) + _sinc(np.pi * fn - half))
    den = 1.0 + gamma * float(_sinc(half))
    if den <= 0:
        raise ValueError("profile has non-positive total intensity")
    return num / den


def _temporal_factor(tau, coherence_time):
    tau = np.asarray(tau, dtype=float)
    if np.all(tau == 0):
        return np.ones_like(tau)
    if coherence_time is None or coherence_time <= 0:
        raise ValueError("nonzero tau needs a positive coherence_time")
    return np.exp(-math.pi * tau**2 / coherence_time**2)


def g2_thermal_uniform(fn, tau=0.0, coherence_time: Optional[float] = None):
    """Unpolarized chaotic g2 for a uniform near field of width w.

    1 + (1/2) sinc^2(pi FN) exp(-pi tau^2/tau_c^2); the 1/2 accounts for the
    two uncorrelated polarization modes.
    """
    vis = _sinc(np.pi * np.asarray(fn, dtype=float))
    return 1.0 + 0.5 * vis**2 * _temporal_factor(tau, coherence_time)


def g2_cosine_profile(
    fn,
    gamma: float,
    omega: float,
    width: float,
    tau=0.0,
    coherence_time: Optional[float] = None,
):
    """Unpolarized chaotic g2 for a cosine-modulated near field (closed form)."""
    vis = vcz_visibility(fn, gamma, omega, width)
    return 1.0 + 0.5 * vis**2 * _temporal_factor(tau, coherence_time)


def g2_vcz(
    profile: Callable[[float], float],
    support: Tuple[float, float],
    baseline: float,
    wavelength: float,
    distance: float,
    tau: float = 0.0,
    coherence_time: Optional[float] = None,
) -> float:
    """Unpolarized chaotic g2 for an arbitrary 1-D near-field intensity profile.

    The visibility is the normalized 1-D Fourier transform of ``profile`` over
    ``support`` at spatial frequency 2*pi*baseline/(wavelength*distance),
    evaluated by adaptive quadrature (relative tolerance 1e-10).
    """
    lo, hi = support
    if not lo < hi:
        raise ValueError("support must be an increasing (lo, hi) interval")
    sample = np.linspace(lo, hi, 129)
    vals = np.array([profile(x) for x in sample], dtype=float)
    if np.any(vals < -1e-12):
        raise ValueError("near-field intensity must be nonnegative on the support")

    k = 2.0 * math.pi * baseline / (wavelength * distance)
    quad_opts = dict(epsabs=1e-13, epsrel=1e-10, limit=400)
    total, _ = integrate.quad(profile, lo, hi, **quad_opts)
    if total <= 0:
        raise ValueError("profile has zero total intensity")
    re, _ = integrate.quad(lambda x: profile(x) * math.cos(k * x), lo, hi, **quad_opts)
    im, _ = integrate.quad(lambda x: profile(x) * math.sin(k * x), lo, hi, **quad_opts)
    vis2 = (re * re + im * im) / (total * total)
    return float(1.0 + 0.5 * vis2 * _temporal_factor(tau, coherence_time))


def mode_count(width: float, baseline: float, wavelength: float, distance: float) -> float:
    """Number of uncorrelated photon modes seen by a detector pair.

    q = (1/16) * (pi * w * x / (lambda * L))^2; bunching contrast dilutes as
    1/q, so resolving it requires q of order one.  The kinematic value drops
    below one at small baselines; physically q >= 1 applies.
    """
    if min(width, wavelength, distance) <= 0 or baseline < 0:
        raise ValueError("width, wavelength, distance must be positive; baseline >= 0")
    fn = fresnel_number(width, baseline, wavelength, distance)
    return (math.pi * fn) ** 2 / 16.0


# ---------------------------------------------------------------------------
# least-squares fits


@dataclass(frozen=True)
class FitResult:
    """Near-field fit output: modulation depth and spatial frequency."""

    gamma: float
    omega: float           # rad / meter
    residual_norm: float
    covariance: np.ndarray  # 2x2 over (gamma, omega)
    converged: bool
    n_points: int


def fit_near_field(
    points,
    width: float,
    sigma=None,
    n_starts: int = 8,
    max_nfev: Optional[int] = None,
) -> FitResult:
    """Fit the cosine-profile g2 model to zero-delay maxima versus FN.

    ``points`` is a sequence of (FN, g2_max) pairs, at least four, ideally
    spanning FN from 0 to about 1.5.  The model is multimodal in the spatial
    frequency, so the fit restarts from a grid of Omega values in
    [pi/width, 5*pi/width] and keeps the best optimum.  ``sigma`` weights the
    residuals per point; the optimum is invariant under a uniform rescaling
    of all weights.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be a sequence of (FN, g2_max) pairs")
    fn, y = pts[:, 0], pts[:, 1]
    sig = None if sigma is None else np.asarray(sigma, dtype=float)
    if sig is not None and sig.shape != y.shape:
        raise ValueError("sigma must match the number of points")
    keep = np.isfinite(fn) & np.isfinite(y)
    if sig is not None:
        keep &= np.isfinite(sig) & (sig > 0)
        sig = sig[keep]
    fn, y = fn[keep], y[keep]
    if y.size < 4:
        raise ValueError("need at least 4 finite points to fit (gamma, Omega)")
    weights = np.ones_like(y) if sig is None else 1.0 / sig

    def resid(p):
        gamma, half = p
        model = 1.0 + 0.5 * vcz_visibility(fn, gamma, 2.0 * half / width, width) ** 2
        return (model - y) * weights

    half_grid = np.linspace(0.5 * math.pi, 2.5 * math.pi, n_starts)
    best = None
    for half0 in half_grid:
        for gamma0 in (-0.4, 0.4):
            try:
                sol = optimize.least_squares(
                    resid,
                    x0=[gamma0, half0],
                    bounds=([-1.0, 1e-6], [1.0, 8.0 * math.pi]),
                    max_nfev=max_nfev,
                )
            except Exception:
                continue
            if best is None or sol.cost < best.cost:
                best = sol
    if best is None:
        raise RuntimeError("all fit starts failed")

    converged = bool(best.status > 0 and np.isfinite(best.cost))
    gamma_hat, half_hat = best.x
    omega_hat = 2.0 * half_hat / width

    dof = max(1, y.size - 2)
    s2 = 2.0 * best.cost / dof
    jac = best.jac
    try:
        cov_half = np.linalg.inv(jac.T @ jac) * s2
        scale = np.diag([1.0, 2.0 / width])
        cov = scale @ cov_half @ scale.T
    except np.linalg.LinAlgError:
        cov = np.full((2, 2), np.nan)
        converged = False

    return FitResult(
        gamma=float(gamma_hat),
        omega=float(omega_hat),
        residual_norm=float(math.sqrt(2.0 * best.cost)),
        covariance=cov,
        converged=converged,
        n_points=int(y.size),
    )


@dataclass(frozen=True)
class BeatFit:
    """Harmonic fit 1 + a*cos(2*pi*tau/period) of a corrected correlogram."""

    amplitude: float
    period: float
    residual_norm: float
    converged: bool


def fit_beat(tau, g2, sigma=None, period_guess: Optional[float] = None) -> BeatFit:
    """Fit a zero-phase cosine beat to g2(tau) samples.

    The starting period comes from the periodogram peak of g2 - mean unless
    ``period_guess`` is given.
    """
    tau = np.asarray(tau, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    if tau.size != g2.size:
        raise ValueError("tau and g2 must have the same length")
    sig = None if sigma is None else np.asarray(sigma, dtype=float)
    keep = np.isfinite(tau) & np.isfinite(g2)
    if sig is not None:
        keep &= np.isfinite(sig) & (sig > 0)
        sig = sig[keep]
    tau, g2 = tau[keep], g2[keep]
    if tau.size < 8:
        raise ValueError("need at least 8 finite samples")
    weights = np.ones_like(g2) if sig is None else 1.0 / sig

    if period_guess is None:
        order = np.argsort(tau)
        ts, ys = tau[order], g2[order] - g2.mean()
        dt = np.median(np.diff(ts))
        spectrum = np.abs(np.fft.rfft(ys))
        freqs = np.fft.rfftfreq(ts.size, d=dt)
        peak = int(np.argmax(spectrum[1:]) + 1)
        if freqs[peak] <= 0:
            raise ValueError("could not find a beat frequency; pass period_guess")
        period_guess = 1.0 / freqs[peak]

    # local cost minima in the period are closely spaced; scan a fine grid
    # around the guess with the amplitude solved in closed form, then polish
    w2 = weights * weights
    excess = g2 - 1.0
    best_period, best_amp, best_cost = period_guess, 0.0, np.inf
    for period in period_guess * np.linspace(0.75, 1.3, 121):
        c = np.cos(2.0 * math.pi * tau / period)
        denom = float(np.sum(w2 * c * c))
        amp = max(float(np.sum(w2 * c * excess)) / denom, 0.0) if denom > 0 else 0.0
        cost = float(np.sum(w2 * (excess - amp * c) ** 2))
        if cost < best_cost:
            best_period, best_amp, best_cost = period, amp, cost

    def resid(p):
        amp, period = p
        return (1.0 + amp * np.cos(2.0 * math.pi * tau / period) - g2) * weights

    def jac(p):
        amp, period = p
        arg = 2.0 * math.pi * tau / period
        d_amp = np.cos(arg) * weights
        d_period = amp * np.sin(arg) * arg / period * weights
        return np.column_stack([d_amp, d_period])

    span = tau.max() - tau.min()
    sol = optimize.least_squares(
        resid,
        x0=[best_amp, best_period],
        jac=jac,
        bounds=([0.0, period_guess / 4.0], [2.0, max(4.0 * period_guess, span)]),
        x_scale=[1.0, period_guess],
    )
    return BeatFit(
        amplitude=float(sol.x[0]),
        period=float(sol.x[1]),
        residual_norm=float(math.sqrt(2.0 * sol.cost)),
        converged=bool(sol.status > 0),
    )
