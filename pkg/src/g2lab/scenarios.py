"""Experiment scenarios: config-driven pipelines from source to fitted results.

A scenario config is a TOML document with common tables ([bins], [source],
[spad], [geometry], [lags]) and a [scenario] table of scenario-specific
knobs.  Every run writes its artifact bundle (trace files, per-pair
correlogram CSVs, fit summaries) into an output directory and finishes by
atomically writing ``manifest.json``; an interrupted run leaves no manifest.

Runs are deterministic: a given (config, seed) pair reproduces every output
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import ArrayGeometry, BinSpec, ChannelLayout, Correlogram
from .correlator import LagRange, autocorrelate, correlate_all_pairs, correlate_pair
from .physics import correct_cross, fit_beat, fit_near_field
from .sources import (
    Incoherent,
    Mixture,
    ModulatedThermal,
    SpatialProfile,
    Thermal,
    generate,
    source_from_config,
)
from .spad import SpadModel, detect, measure_background
from .tracefile import write_correlogram_csv, write_traces
from . import __version__

__all__ = ["ConfigError", "SCENARIO_NAMES", "load_config", "run_scenario"]

SCENARIO_NAMES = (
    "background_map",
    "multimode_beat",
    "modulated_thermal",
    "mixture_sweep",
    "vcz_sweep",
    "custom",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NO_CONVERGENCE = 4


class ConfigError(Exception):
    """Scenario config violates the schema."""


def load_config(path) -> dict:
    """Parse a TOML scenario config."""
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return cfg[key]


def _build_bins(cfg: dict) -> BinSpec:
    table = _require(cfg, "bins", "config")
    try:
        return BinSpec(
            bin_width=float(_require(table, "bin_width", "[bins]")),
            window_bins=int(_require(table, "window_bins", "[bins]")),
            series_count=int(_require(table, "series_count", "[bins]")),
        )
    except ValueError as exc:
        raise ConfigError(f"[bins]: {exc}")


def _build_geometry(cfg: dict) -> ArrayGeometry:
    table = cfg.get("geometry", {})
    try:
        return ArrayGeometry(
            rows=int(table.get("rows", 4)),
            cols=int(table.get("cols", 4)),
            pitch_x=float(table.get("pitch_x", 30e-6)),
            pitch_y=float(table.get("pitch_y", 43e-6)),
            wire_order=tuple(table["wire_order"]) if "wire_order" in table else None,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[geometry]: {exc}")


def _build_spad(cfg: dict) -> SpadModel:
    table = cfg.get("spad", {})
    try:
        return SpadModel.from_config(table)
    except ValueError as exc:
        raise ConfigError(f"[spad]: {exc}")


def _build_source(cfg: dict):
    table = _require(cfg, "source", "config")
    try:
        return source_from_config(table)
    except ValueError as exc:
        raise ConfigError(f"[source]: {exc}")


def _build_lags(cfg: dict, default: Optional[LagRange] = None) -> LagRange:
    table = cfg.get("lags")
    if table is None:
        if default is None:
            raise ConfigError("missing [lags] table")
        return default
    try:
        return LagRange(
            l_min=int(_require(table, "l_min", "[lags]")),
            l_max=int(_require(table, "l_max", "[lags]")),
            stride=int(table.get("stride", 1)),
        )
    except ValueError as exc:
        raise ConfigError(f"[lags]: {exc}")


class _Stage:
    """Attributes failures to a named pipeline stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (ConfigError, KeyboardInterrupt)):
            raise RuntimeError(f"stage '{self.name}' failed: {exc}") from exc
        return False


class _Bundle:
    """Collects output files; the manifest is written last, atomically."""

    def __init__(self, out_dir: Path, name: str, seed: int, cfg: dict):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.name = name
        self.seed = seed
        self.cfg = cfg
        self.files: List[str] = []
        self.results: Dict = {}

    def path(self, filename: str) -> Path:
        self.files.append(filename)
        return self.out_dir / filename

    def write_summary(self, payload: dict, filename: str = "summary.json"):
        self.results.update(payload)
        target = self.path(filename)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def finalize(self):
        digest = hashlib.sha256(
            json.dumps(self.cfg, sort_keys=True, default=str).encode()
        ).hexdigest()
        manifest = {
            "scenario": self.name,
            "seed": self.seed,
            "config_sha256": digest,
            "versions": {"g2lab": __version__, "numpy": np.__version__},
            "outputs": sorted(self.files),
        }
        tmp = self.out_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.out_dir / "manifest.json")


def run_scenario(cfg: dict, out_dir, seed: Optional[int] = None, threads: int = 1) -> int:
    """Run a scenario config; returns a process exit code.

    All config tables are validated and built before any compute starts.
    Raises ConfigError for schema problems; runtime failures carry the name
    of the pipeline stage that failed.
    """
    name = _require(cfg, "name", "config")
    if name not in SCENARIO_NAMES:
        raise ConfigError(f"unknown scenario '{name}'; expected one of {SCENARIO_NAMES}")
    if seed is None:
        seed = int(cfg.get("seed", 0))
    runner = {
        "background_map": _run_background_map,
        "multimode_beat": _run_multimode_beat,
        "modulated_thermal": _run_modulated_thermal,
        "mixture_sweep": _run_mixture_sweep,
        "vcz_sweep": _run_vcz_sweep,
        "custom": _run_custom,
    }[name]
    bundle = _Bundle(out_dir, name, seed, cfg)
    code = runner(cfg, bundle, seed, threads)
    bundle.finalize()
    return code


def _pair_filename(i: int, j: int, prefix: str = "pair") -> str:
    return f"{prefix}_{i:02d}_{j:02d}.csv"


def _sigma_at(corr: Correlogram, lag: int = 0) -> float:
    idx = int(np.nonzero(corr.lags == lag)[0][0])
    return float(corr.sigma_stat()[idx])


def _export_pairs(bundle: _Bundle, pair_map, prefix: str = "pair") -> None:
    index_rows = []
    for (i, j), corr in sorted(pair_map.items()):
        fname = _pair_filename(i, j, prefix)
        write_correlogram_csv(corr, bundle.path(fname))
        index_rows.append({"i": i, "j": j, "file": fname, "kind": corr.kind})
    index = bundle.path(f"{prefix}_index.json")
    index.write_text(json.dumps(index_rows, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scenarios


def _run_background_map(cfg, bundle, seed, threads) -> int:
    spec = _build_bins(cfg)
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    lags = _build_lags(cfg, LagRange.symmetric(100))
    sc = cfg.get("scenario", {})
    rate = float(_require(sc, "rate", "[scenario]"))

    with _Stage("measure_background"):
        pairs = measure_background(
            model, geometry, spec, rate, seed=(seed, 0), lags=lags, workers=threads
        )
    with _Stage("export"):
        _export_pairs(bundle, pairs, prefix="background")
        layout = geometry.layout()
        rows = []
        for (i, j), corr in sorted(pairs.items()):
            rows.append(
                {
                    "i": i,
                    "j": j,
                    "wire_distance": layout.wire_distance(i, j),
                    "baseline": layout.baseline(i, j),
                    "g2_zero": corr.at_lag(0),
                    "sigma": _sigma_at(corr),
                }
            )
        _write_table(bundle.path("maxima_map.csv"), rows)
        bundle.write_summary({"pair_count": len(pairs), "rate": rate})
    return EXIT_OK


def _detected_pair_run(source, spec, layout, model, seed, lags, threads):
    ideal = generate(source, spec, layout, seed=(seed, 1))
    detected = detect(ideal, model, layout, seed=(seed, 2))
    raw = correlate_pair(detected, 0, 1, lags, workers=threads)
    return ideal, detected, raw


def _run_multimode_beat(cfg, bundle, seed, threads) -> int:
    spec = _build_bins(cfg)
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    source = _build_source(cfg)
    lags = _build_lags(cfg, LagRange.symmetric(250))
    sc = cfg.get("scenario", {})
    pixels = tuple(sc.get("pixels", (4, 8)))
    if len(pixels) != 2:
        raise ConfigError("[scenario]: pixels must name exactly two detectors")
    layout = geometry.subset(pixels)

    with _Stage("generate+detect"):
        ideal, detected, raw = _detected_pair_run(source, spec, layout, model, seed, lags, threads)
    with _Stage("measure_background"):
        bg = measure_background(
            model, layout, spec, source.rate, seed=(seed, 3), lags=lags, workers=threads
        )[(0, 1)]
    with _Stage("correct"):
        corrected = correct_cross(raw, bg, model.afterpulse_prob)
    with _Stage("fit"):
        guess = getattr(source, "roundtrip_time", None)
        fit = fit_beat(corrected.tau, corrected.g2, sigma=corrected.sigma_stat(), period_guess=guess)
    with _Stage("export"):
        write_traces(detected, bundle.path("detected.g2tr"))
        write_correlogram_csv(raw, bundle.path("raw.csv"))
        write_correlogram_csv(bg, bundle.path("background.csv"))
        write_correlogram_csv(corrected, bundle.path("corrected.csv"))
        bundle.write_summary(
            {
                "pixels": list(pixels),
                "detected_rate_hz": [detected.mean_rate(0), detected.mean_rate(1)],
                "beat_amplitude": fit.amplitude,
                "beat_period_s": fit.period,
                "fit_residual_norm": fit.residual_norm,
                "fit_converged": fit.converged,
            }
        )
    return EXIT_OK if fit.converged else EXIT_NO_CONVERGENCE


def _run_modulated_thermal(cfg, bundle, seed, threads) -> int:
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    source = _build_source(cfg)
    sc = cfg.get("scenario", {})
    pixels = tuple(sc.get("pixels", (4, 8)))
    layout = geometry.subset(pixels)
    runs = sc.get("runs")
    if not runs or not isinstance(runs, list):
        raise ConfigError("[scenario]: needs a 'runs' list of binning tables")
    specs = []
    for k, entry in enumerate(runs):
        try:
            specs.append(
                BinSpec(
                    bin_width=float(entry["bin_width"]),
                    window_bins=int(entry["window_bins"]),
                    series_count=int(entry["series_count"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[scenario.runs][{k}]: {exc}")

    rows = []
    for k, spec in enumerate(specs):
        with _Stage(f"run{k}"):
            lags = LagRange(0, 0)
            _, detected, raw = _detected_pair_run(
                source, spec, layout, model, (seed, 10 + k), lags, threads
            )
            write_correlogram_csv(raw, bundle.path(f"run{k}_zero_lag.csv"))
            rows.append(
                {
                    "run": k,
                    "bin_width": spec.bin_width,
                    "window_bins": spec.window_bins,
                    "series_count": spec.series_count,
                    "g2_zero": raw.at_lag(0),
                    "sigma": _sigma_at(raw),
                }
            )
    with _Stage("compare"):
        delta = abs(rows[0]["g2_zero"] - rows[1]["g2_zero"]) if len(rows) >= 2 else 0.0
        sigma = math.hypot(*(r["sigma"] for r in rows[:2])) if len(rows) >= 2 else float("nan")
        _write_table(bundle.path("runs.csv"), rows)
        bundle.write_summary(
            {
                "g2_zero": [r["g2_zero"] for r in rows],
                "delta": delta,
                "sigma_combined": sigma,
                "z_score": delta / sigma if sigma > 0 else float("nan"),
            }
        )
    return EXIT_OK


def _run_mixture_sweep(cfg, bundle, seed, threads) -> int:
    spec = _build_bins(cfg)
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    sc = cfg.get("scenario", {})
    pixels = tuple(sc.get("pixels", (4, 8)))
    layout = geometry.subset(pixels)
    fractions = [float(f) for f in sc.get("fractions", (0.25, 0.38, 0.5, 0.75, 1.0))]
    total_rate = float(_require(sc, "total_rate", "[scenario]"))
    mod_freq = float(sc.get("mod_freq", 60e3))
    mod_depth = float(sc.get("mod_depth", 1.0))
    waveform = sc.get("waveform", "cosine")

    with _Stage("measure_background"):
        bg = measure_background(
            model, layout, spec, total_rate, seed=(seed, 3), lags=LagRange(0, 0), workers=threads
        )[(0, 1)]

    rows = []
    for k, frac in enumerate(fractions):
        with _Stage(f"fraction{k}"):
            thermal = ModulatedThermal(
                rate=max(frac, 1e-12) * total_rate,
                mod_freq=mod_freq,
                mod_depth=mod_depth,
                waveform=waveform,
            )
            if frac >= 1.0:
                source = thermal
            elif frac <= 0.0:
                source = Incoherent(rate=total_rate)
            else:
                source = Mixture(
                    components=((thermal, frac), (Incoherent(rate=1.0), 1.0 - frac)),
                    rate=total_rate,
                )
            _, detected, raw = _detected_pair_run(
                source, spec, layout, model, (seed, 20 + k), LagRange(0, 0), threads
            )
            corrected = correct_cross(raw, bg, model.afterpulse_prob)
            g2_zero = float(corrected.g2[0])
            rows.append(
                {
                    "fraction": frac,
                    "fraction_sq": frac * frac,
                    "g2_zero": g2_zero,
                    "excess": g2_zero - 1.0,
                    "sigma": float(corrected.sigma[0]),
                }
            )
    with _Stage("fit"):
        x = np.array([r["fraction_sq"] for r in rows])
        y = np.array([r["excess"] for r in rows])
        slope = float(np.sum(x * y) / np.sum(x * x))
        resid = y - slope * x
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r_squared = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else float("nan")
        _write_table(bundle.path("sweep.csv"), rows)
        bundle.write_summary({"slope": slope, "r_squared": r_squared, "fractions": fractions})
    return EXIT_OK


def _run_vcz_sweep(cfg, bundle, seed, threads) -> int:
    spec = _build_bins(cfg)
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    sc = cfg.get("scenario", {})
    row_pixels = tuple(sc.get("row_pixels", (0, 4, 8, 12)))
    layout = geometry.subset(row_pixels)
    distances = [float(v) for v in _require(sc, "distances", "[scenario]")]
    nf = _require(sc, "near_field", "[scenario]")
    try:
        width = float(_require(nf, "width", "[scenario.near_field]"))
        wavelength = float(_require(nf, "wavelength", "[scenario.near_field]"))
        gamma = float(nf.get("gamma", 0.0))
        omega = float(nf.get("omega_pi_per_width", 0.0)) * math.pi / width
        coherence_time = float(_require(nf, "coherence_time", "[scenario.near_field]"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[scenario.near_field]: {exc}")
    rate = float(_require(sc, "rate", "[scenario]"))
    max_fn = float(sc.get("max_fresnel", 1.6))

    with _Stage("measure_background"):
        bg_pairs = measure_background(
            model, layout, spec, rate, seed=(seed, 3), lags=LagRange(0, 0), workers=threads
        )

    points = []
    for k, distance in enumerate(distances):
        with _Stage(f"distance{k}"):
            profile = SpatialProfile(
                near_field_width=width,
                wavelength=wavelength,
                distance=distance,
                modulation_depth=gamma,
                spatial_freq=omega,
            )
            source = Thermal(
                rate=rate, coherence_time=coherence_time, polarized=False, spatial=profile
            )
            ideal = generate(source, spec, layout, seed=(seed, 30 + k))
            detected = detect(ideal, model, layout, seed=(seed, 60 + k))
            raw_pairs = correlate_all_pairs(detected, LagRange(0, 0), workers=threads)
            map_rows = []
            for (i, j), raw in sorted(raw_pairs.items()):
                corrected = correct_cross(raw, bg_pairs[(i, j)], model.afterpulse_prob)
                fn = profile.fresnel_number(abs(layout.baseline_x(i, j)))
                entry = {
                    "i": i,
                    "j": j,
                    "distance": distance,
                    "fresnel": fn,
                    "g2_max": float(corrected.g2[0]),
                    "sigma": float(corrected.sigma[0]),
                }
                map_rows.append(entry)
                if fn <= max_fn:
                    points.append(entry)
            _write_table(bundle.path(f"pair_map_{k}.csv"), map_rows)

    with _Stage("fit"):
        points.sort(key=lambda r: r["fresnel"])
        _write_table(bundle.path("points.csv"), points)
        fit = fit_near_field(
            [(p["fresnel"], p["g2_max"]) for p in points],
            width,
            sigma=[p["sigma"] for p in points],
        )
        bundle.write_summary(
            {
                "gamma": fit.gamma,
                "omega_pi_per_width": fit.omega * width / math.pi,
                "residual_norm": fit.residual_norm,
                "fit_converged": fit.converged,
                "n_points": fit.n_points,
            }
        )
    return EXIT_OK if fit.converged else EXIT_NO_CONVERGENCE


def _run_custom(cfg, bundle, seed, threads) -> int:
    spec = _build_bins(cfg)
    geometry = _build_geometry(cfg)
    model = _build_spad(cfg)
    source = _build_source(cfg)
    lags = _build_lags(cfg, LagRange.symmetric(100))
    sc = cfg.get("scenario", {})
    pixels = sc.get("pixels")
    layout = geometry.subset(tuple(pixels)) if pixels else geometry.layout()

    with _Stage("generate"):
        ideal = generate(source, spec, layout, seed=(seed, 1))
    with _Stage("detect"):
        detected = detect(ideal, model, layout, seed=(seed, 2))
    with _Stage("correlate"):
        pairs = correlate_all_pairs(detected, lags, workers=threads)
        autos = {c: autocorrelate(detected, c, lags) for c in range(detected.channel_count)}
    with _Stage("export"):
        write_traces(detected, bundle.path("detected.g2tr"))
        _export_pairs(bundle, pairs)
        for c, corr in autos.items():
            write_correlogram_csv(corr, bundle.path(f"auto_{c:02d}.csv"))
        bundle.write_summary(
            {
                "channels": detected.channel_count,
                "detected_rate_hz": [detected.mean_rate(c) for c in range(detected.channel_count)],
            }
        )
    return EXIT_OK


def _write_table(path: Path, rows: List[dict]) -> None:
    """Deterministic CSV from a list of homogeneous dicts."""
    import csv

    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}
            )
