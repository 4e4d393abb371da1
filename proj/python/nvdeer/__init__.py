"""Simulation and fitting of NV-DEER defect metrology experiments."""

from ._core import (
    ConfigError,
    Error,
    FitFailure,
    IntegrationFailure,
    InvalidArgument,
    InvalidData,
    LorentzianPeak,
    LorentzianPeakSet,
    NumericFailure,
    SpectrumTrace,
    __version__,
    aggregate,
    compute_sigma,
    config_hash,
    config_keys,
    deer_rate_per_density,
    deer_rate_per_us,
    deer_signal_from_transfer,
    default_config,
    detection_limit,
    fit,
    fit_deer_decay,
    fit_hahn_decay,
    fit_lorentzian_peaks,
    fit_rabi_frequency,
    lorentzian,
    nv_level_populations,
    population_transfer,
    rabi_probability,
    run_acceptance,
    simulate,
    simulate_deer_spectrum,
    spectral_lines,
    steady_state,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
