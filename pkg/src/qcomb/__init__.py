"""Simulation and estimation toolkit for microring photon-pair sources."""

__version__ = "0.1.0"

from .config import ExperimentConfig, default_config, load_config
from .counts import ChannelPair, DetectorModel, LossChain, PowerSweep, extract_R_PG
from .errors import DataError, FitError, QcombError
from .fitcore import FitProblem, FitResult, fit_linear, fit_nlls, fit_polynomial
from .franson import FransonConfig, FringeScan, chsh_from_visibility, visibility_from_scan
from .pipeline import ExperimentReport, run_analysis, run_forward
from .resonator import CouplerDesign, RingResonator, extract_gamma, pair_generation_rate
from .spectra import Resonance, TransmissionSpectrum, analyze_spectrum, fit_dispersion
from .timestamps import TimestampStream, build_histogram, count_coincidences, fit_coherence_time

__all__ = [
    "ChannelPair", "CouplerDesign", "DataError", "DetectorModel", "ExperimentConfig", "FitError",
    "FitProblem", "FitResult", "FransonConfig", "FringeScan", "LossChain", "ExperimentReport", "PowerSweep",
    "QcombError", "Resonance", "RingResonator", "TimestampStream", "TransmissionSpectrum",
    "analyze_spectrum", "build_histogram", "chsh_from_visibility", "count_coincidences", "default_config",
    "extract_R_PG", "extract_gamma", "fit_coherence_time", "fit_dispersion", "fit_linear", "fit_nlls",
    "fit_polynomial", "load_config", "pair_generation_rate", "run_analysis", "run_forward",
    "visibility_from_scan",
]
