"""g2lab: simulation and analysis of SPAD-array photon-correlation measurements.

Generate detection bitstreams for light sources with different statistics,
push them through a realistic SPAD detector model, estimate normalized
second-order correlation functions g2(x, tau) exactly on the bit-packed
streams, and compare against the analytic coherence models.
"""

from .core import (
    ArrayGeometry,
    BinSpec,
    ChannelLayout,
    Correlogram,
    EventTraceSet,
    merge_partial,
    pack_traces,
    unpack_traces,
)
from .correlator import LagRange, autocorrelate, correlate_all_pairs, correlate_pair
from .sources import (
    Coherent,
    Incoherent,
    Mixture,
    ModulatedThermal,
    MultimodeCoherent,
    SpatialProfile,
    Thermal,
    generate,
    spatial_correlation_from_profile,
    thermal_field_pair,
)
from .spad import (
    CrosstalkModel,
    DetectionStats,
    SpadModel,
    detect,
    detect_with_stats,
    incoherent_rate_for_detected,
    measure_background,
)
from .physics import (
    AfterpulseProfile,
    BeatFit,
    FitResult,
    LightStateModel,
    correct_auto,
    correct_cross,
    fit_beat,
    fit_near_field,
    fresnel_number,
    g2_cosine_profile,
    g2_thermal_uniform,
    g2_vcz,
    mix_g2,
    mode_count,
    table1_g1,
    table1_g2,
    vcz_visibility,
)
from .tracefile import read_correlogram_csv, read_traces, write_correlogram_csv, write_traces

__version__ = "0.1.0"
