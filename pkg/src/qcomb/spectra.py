"""Transmission-spectrum analysis for an all-pass ring.

Resonance finding, Lorentzian dip fits with Q extraction and the
intrinsic/external split, and the integrated-dispersion fit
``D_int(mu) = omega_mu - (omega_0 + D1 mu) = D2 mu^2 / 2 + ...``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import percentile_filter
from scipy.signal import find_peaks, peak_widths

from . import units
from .errors import (
    AmbiguousCoupling,
    FitDiverged,
    FitError,
    FormatError,
    InsufficientModes,
    NoResonancesFound,
)
from .fitcore import FitProblem, fit_linear, fit_nlls

COUPLING_REGIMES = ("under", "over", "critical")
# below this residual transmission the two coupling branches differ by < 15 % in Q
_CRITICAL_TMIN = 0.02


@dataclass
class TransmissionSpectrum:
    wavelength_nm: np.ndarray
    transmission_dB: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.wavelength_nm = np.asarray(self.wavelength_nm, dtype=float)
        self.transmission_dB = np.asarray(self.transmission_dB, dtype=float)
        if self.wavelength_nm.shape != self.transmission_dB.shape or self.wavelength_nm.ndim != 1:
            raise ValueError("wavelength and transmission must be 1-D arrays of equal length")
        if len(self.wavelength_nm) > 1 and np.any(np.diff(self.wavelength_nm) <= 0):
            raise ValueError("wavelengths must be strictly increasing")

    def __len__(self):
        return len(self.wavelength_nm)

    @property
    def linear(self) -> np.ndarray:
        return np.power(10.0, self.transmission_dB / 10.0)

    def window(self, start, stop) -> "TransmissionSpectrum":
        return TransmissionSpectrum(
            self.wavelength_nm[start:stop], self.transmission_dB[start:stop], dict(self.metadata)
        )


@dataclass
class ResonanceCandidate:
    lambda_nm: float
    depth_dB: float
    fwhm_estimate_pm: float
    start: int
    stop: int
    window: TransmissionSpectrum = field(repr=False)

    @property
    def extinction_dB(self) -> float:
        return self.depth_dB


@dataclass
class Resonance:
    lambda0_nm: float
    fwhm_pm: float
    extinction_dB: float
    Q_loaded: float
    Q_intrinsic: float
    Q_external: float
    mode_index_mu: int = 0
    coupling: str = "critical"
    t_min: float = 0.0
    lambda0_err_pm: float = float("nan")

    def as_dict(self):
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


@dataclass
class DispersionFit:
    D1_over_2pi_GHz: float
    D2_over_2pi_MHz: float
    omega0: float
    mu: np.ndarray
    dint_MHz: np.ndarray  # measured D_int / 2pi, zero at the pump by construction
    residuals_MHz: np.ndarray  # after removing the fitted quadratic
    D1_err_GHz: float = float("nan")
    D2_err_MHz: float = float("nan")

    @property
    def D1(self):
        return 2 * math.pi * self.D1_over_2pi_GHz * 1e9

    @property
    def D2(self):
        return 2 * math.pi * self.D2_over_2pi_MHz * 1e6

    def as_dict(self):
        return {
            "D1_over_2pi_GHz": self.D1_over_2pi_GHz,
            "D1_err_GHz": self.D1_err_GHz,
            "D2_over_2pi_MHz": self.D2_over_2pi_MHz,
            "D2_err_MHz": self.D2_err_MHz,
            "omega0_rad_per_s": self.omega0,
            "mu": [int(m) for m in self.mu],
            "dint_MHz": [float(v) for v in self.dint_MHz],
            "residuals_MHz": [float(v) for v in self.residuals_MHz],
        }


# ---------------------------------------------------------------- Q algebra


def loaded_q(q_intrinsic, q_external):
    return 1.0 / (1.0 / q_intrinsic + 1.0 / q_external)


def min_transmission(q_intrinsic, q_external):
    """On-resonance power transmission of an all-pass ring."""
    a, b = 1.0 / q_intrinsic, 1.0 / q_external
    return ((b - a) / (b + a)) ** 2


def split_q(q_loaded, t_min, coupling):
    """Split a loaded Q into (Q_intrinsic, Q_external) from the dip depth.

    ``coupling`` picks the branch of ``sqrt(T_min) = |1/Qe - 1/Qi| / (1/Qe + 1/Qi)``:
    'over' means Qe < Qi, 'under' means Qe > Qi, 'critical' forces Qi = Qe.
    """
    if coupling not in COUPLING_REGIMES:
        raise ValueError(f"coupling must be one of {COUPLING_REGIMES}, got {coupling!r}")
    if coupling == "critical":
        return 2.0 * q_loaded, 2.0 * q_loaded
    s = math.sqrt(min(max(t_min, 0.0), 1.0))
    hi, lo = 2.0 * q_loaded / (1.0 - s) if s < 1 else math.inf, 2.0 * q_loaded / (1.0 + s)
    return (hi, lo) if coupling == "over" else (lo, hi)


# ---------------------------------------------------------------- generators


def lorentzian_dip(wavelength_nm, lambda0_nm, fwhm_pm, t_min, baseline=1.0):
    """Linear transmission of one dip."""
    dx = (np.asarray(wavelength_nm, dtype=float) - lambda0_nm) * 1e3
    hw2 = (0.5 * fwhm_pm) ** 2
    return baseline * (1.0 - (1.0 - t_min) * hw2 / (dx * dx + hw2))


def comb_frequencies(nu_pump_Hz, D1_over_2pi_Hz, D2_over_2pi_Hz, mu, D3_over_2pi_Hz=0.0):
    mu = np.asarray(mu, dtype=float)
    return nu_pump_Hz + D1_over_2pi_Hz * mu + integrated_dispersion(mu, D2_over_2pi_Hz, D3_over_2pi_Hz)


def integrated_dispersion(mu, D2, D3=0.0):
    """D_int(mu) truncated at third order; same units as D2."""
    mu = np.asarray(mu, dtype=float)
    return 0.5 * D2 * mu**2 + D3 * mu**3 / 6.0


def comb_wavelengths(pump_nm, D1_over_2pi_Hz, D2_over_2pi_Hz, mu, D3_over_2pi_Hz=0.0):
    nu = comb_frequencies(units.wavelength_to_frequency(pump_nm), D1_over_2pi_Hz, D2_over_2pi_Hz, mu, D3_over_2pi_Hz)
    return units.frequency_to_wavelength(nu)


def generate_spectrum(wavelength_nm, centers_nm, q_loaded, t_min, baseline=1.0, metadata=None):
    """Noiseless comb spectrum in the isolated-resonance approximation.

    Each sample takes the Lorentzian of its nearest resonance, so every
    resonance window contains exactly one line shape.
    """
    lam = np.asarray(wavelength_nm, dtype=float)
    centers = np.atleast_1d(np.asarray(centers_nm, dtype=float))
    order = np.argsort(centers)
    centers = centers[order]
    ql = np.broadcast_to(np.asarray(q_loaded, dtype=float), centers.shape)[order]
    tm = np.broadcast_to(np.asarray(t_min, dtype=float), centers.shape)[order]
    if len(centers) > 1:
        mids = 0.5 * (centers[1:] + centers[:-1])
        nearest = np.searchsorted(mids, lam)
    else:
        nearest = np.zeros(len(lam), dtype=int)
    fwhm = centers[nearest] * 1e3 / ql[nearest]
    lin = lorentzian_dip(lam, centers[nearest], fwhm, tm[nearest], baseline)
    return TransmissionSpectrum(lam, 10.0 * np.log10(lin), dict(metadata or {}))


# ---------------------------------------------------------------- analysis


def normalized_transmission(spectrum: TransmissionSpectrum, window_pts=None) -> np.ndarray:
    """Linear transmission divided by a rolling 95th-percentile baseline."""
    lin = spectrum.linear
    n = len(lin)
    if window_pts is None:
        step = np.median(np.diff(spectrum.wavelength_nm)) if n > 1 else 1.0
        window_pts = min(n // 2, int(4.0 / step))
    window_pts = max(5, int(window_pts)) | 1
    base = percentile_filter(lin, 95, size=min(window_pts, max(n, 1)), mode="nearest")
    return lin / base


def find_resonances(spectrum: TransmissionSpectrum, min_depth_dB=3.0, baseline_window_pts=None):
    """Local transmission minima deeper than ``min_depth_dB`` below the baseline.

    Each candidate carries a fit window of +-3 estimated linewidths, cut from
    the baseline-normalised spectrum.  Ordered by wavelength.
    """
    if min_depth_dB <= 0:
        raise ValueError("min_depth_dB must be positive")
    if len(spectrum) < 5:
        raise NoResonancesFound("spectrum too short")
    norm = normalized_transmission(spectrum, baseline_window_pts)
    norm_dB = 10.0 * np.log10(np.clip(norm, 1e-30, None))
    depth = -norm_dB
    peaks, _ = find_peaks(depth, height=min_depth_dB, prominence=0.5 * min_depth_dB)
    if len(peaks) == 0:
        raise NoResonancesFound(f"no dips deeper than {min_depth_dB} dB")
    absorption = 1.0 - norm
    widths = peak_widths(absorption, peaks, rel_height=0.5)[0]
    lam = spectrum.wavelength_nm
    normed = TransmissionSpectrum(lam, norm_dB, dict(spectrum.metadata))
    step_pm = 1e3 * np.gradient(lam)
    out = []
    for k, w in zip(peaks, widths):
        center = lam[k]
        if 0 < k < len(lam) - 1:
            y0, y1, y2 = norm[k - 1], norm[k], norm[k + 1]
            den = y0 - 2 * y1 + y2
            if den > 0:
                center = lam[k] + 0.5 * (y0 - y2) / den * (lam[k + 1] - lam[k - 1]) / 2
        half = max(3, int(math.ceil(3.0 * max(w, 1.0))))
        start, stop = max(0, k - half), min(len(lam), k + half + 1)
        out.append(
            ResonanceCandidate(
                lambda_nm=float(center),
                depth_dB=float(depth[k]),
                fwhm_estimate_pm=float(w * step_pm[k]),
                start=int(start),
                stop=int(stop),
                window=normed.window(start, stop),
            )
        )
    return out


def _dip_model(p, x):
    base, amp, x0, gamma = p
    hw2 = 0.25 * gamma * gamma
    return base * (1.0 - amp * hw2 / ((x - x0) ** 2 + hw2))


def fit_lorentzian(window: TransmissionSpectrum, coupling=None, tol_rel=1e-12) -> Resonance:
    """Fit one Lorentzian dip (linear transmission, free baseline) and extract Q factors.

    ``Q_loaded = lambda0 / FWHM``.  The intrinsic/external split needs the
    coupling regime; without it the call is refused unless the dip is nearly
    critical (``T_min <= 0.02``), in which case Qi = Qe = 2 Q_loaded.
    """
    lam = window.wavelength_nm
    lin = window.linear
    if len(lam) < 5:
        raise FitDiverged("window too short for a 4-parameter dip fit")
    k = int(np.argmin(lin))
    ref = lam[k]
    x = (lam - ref) * 1e3  # pm
    base0 = float(np.percentile(lin, 95))
    amp0 = min(max(1.0 - lin[k] / base0, 1e-3), 0.999)
    half_level = base0 * (1.0 - 0.5 * amp0)
    below = np.nonzero(lin <= half_level)[0]
    gamma0 = max(x[below[-1]] - x[below[0]], 2.0 * np.median(np.diff(x))) if len(below) else (x[-1] - x[0]) / 6
    problem = FitProblem(_dip_model, x, lin, np.ones_like(lin), [base0, amp0, 0.0, gamma0])
    try:
        res = fit_nlls(problem, max_iter=500, tol_rel=tol_rel)
    except FitError as exc:
        raise FitDiverged(f"dip fit failed near {ref:.4f} nm: {exc}") from exc
    base, amp, x0, gamma = res.params
    gamma = abs(gamma)
    if not res.converged or amp <= 0 or gamma <= 0 or not (x[0] <= x0 <= x[-1]):
        raise FitDiverged(f"dip fit diverged near {ref:.4f} nm")
    lambda0 = ref + x0 * 1e-3
    t_min = float(min(max(1.0 - amp, 0.0), 1.0))
    if coupling is None:
        if t_min > _CRITICAL_TMIN:
            raise AmbiguousCoupling(
                f"T_min={t_min:.3f}: coupling regime must be given (under/over/critical)"
            )
        coupling = "critical"
    q_l = lambda0 * 1e3 / gamma
    q_i, q_e = split_q(q_l, t_min, coupling)
    return Resonance(
        lambda0_nm=float(lambda0),
        fwhm_pm=float(gamma),
        extinction_dB=float(-10.0 * math.log10(t_min)) if t_min > 0 else math.inf,
        Q_loaded=float(q_l),
        Q_intrinsic=float(q_i),
        Q_external=float(q_e),
        coupling=coupling,
        t_min=t_min,
        lambda0_err_pm=float(res.stderr[2]),
    )


def analyze_spectrum(spectrum, min_depth_dB=3.0, coupling=None, pump_wavelength_nm=None):
    """find_resonances + fit_lorentzian on every candidate, with mode numbers assigned."""
    resonances = [fit_lorentzian(c.window, coupling) for c in find_resonances(spectrum, min_depth_dB)]
    return assign_mode_numbers(resonances, pump_wavelength_nm)


def assign_mode_numbers(resonances, pump_wavelength_nm=None):
    """Signed mode number relative to the resonance nearest the pump; mu grows with frequency."""
    if not resonances:
        return resonances
    nu = units.wavelength_to_frequency(np.array([r.lambda0_nm for r in resonances]))
    if pump_wavelength_nm is None:
        ip = int(np.argsort(nu)[len(nu) // 2])
    else:
        ip = int(np.argmin(np.abs(np.array([r.lambda0_nm for r in resonances]) - pump_wavelength_nm)))
    mu = _mode_numbers(nu, ip)
    for r, m in zip(resonances, mu):
        r.mode_index_mu = int(m)
    return resonances


def _mode_numbers(nu, pump_index):
    order = np.sort(nu)
    spacing = np.median(np.diff(order)) if len(nu) > 1 else 1.0
    return np.rint((nu - nu[pump_index]) / spacing).astype(int)


def fit_dispersion(resonances, pump_index) -> DispersionFit:
    """Fit ``omega_mu = omega_0 + D1 mu + D2 mu^2 / 2`` to resonance centres.

    ``pump_index`` selects the pump resonance in ``resonances`` (as given).
    Mode numbers come from rounding frequency offsets to the median spacing,
    so a missing resonance does not shift the numbering.  omega_0 is the
    measured pump resonance, which pins D_int(0) = 0.
    """
    if len(resonances) < 5:
        raise InsufficientModes(f"need >= 5 resonances, got {len(resonances)}")
    lam = np.array([r.lambda0_nm for r in resonances], dtype=float)
    nu = units.wavelength_to_frequency(lam)
    mu = _mode_numbers(nu, pump_index)
    if not (np.any(mu > 0) and np.any(mu < 0)):
        raise InsufficientModes("resonances must lie on both sides of the pump")
    if len(np.unique(mu)) != len(mu):
        raise InsufficientModes("two resonances map to the same mode number")
    y_GHz = (nu - nu[pump_index]) * 1e-9
    design = np.column_stack([mu, 0.5 * mu.astype(float) ** 2])
    res = fit_linear(design, y_GHz, np.ones_like(y_GHz))
    d1, d2 = res.params
    dint = (y_GHz - d1 * mu) * 1e3
    resid = (y_GHz - design @ res.params) * 1e3
    err = res.stderr
    return DispersionFit(
        D1_over_2pi_GHz=float(d1),
        D2_over_2pi_MHz=float(d2 * 1e3),
        omega0=float(2 * math.pi * nu[pump_index]),
        mu=mu,
        dint_MHz=dint,
        residuals_MHz=resid,
        D1_err_GHz=float(err[0]),
        D2_err_MHz=float(err[1] * 1e3),
    )


def gvd_from_D2(D2, D1, n_group):
    """beta2 [s^2/m] from D2, D1 [rad/s]; D2 > 0 (anomalous) gives beta2 < 0."""
    if D1 <= 0:
        raise ValueError("D1 must be positive")
    if n_group <= 1:
        raise ValueError("n_group must exceed 1")
    return -D2 * n_group / (units.C * D1**2)


# ---------------------------------------------------------------- I/O


def read_spectrum_csv(path) -> TransmissionSpectrum:
    path = Path(path)
    lam, t = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["wavelength_nm", "transmission_dB"]:
            raise FormatError("expected header 'wavelength_nm,transmission_dB'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise FormatError("expected two columns", path, lineno)
            for name, val, sink in (("wavelength_nm", row[0], lam), ("transmission_dB", row[1], t)):
                try:
                    sink.append(float(val))
                except ValueError:
                    raise FormatError(f"not a number: {val!r}", path, lineno, name) from None
    lam = np.array(lam)
    if len(lam) > 1 and np.any(np.diff(lam) <= 0):
        bad = int(np.nonzero(np.diff(lam) <= 0)[0][0]) + 3
        raise FormatError("wavelengths must be strictly increasing", path, bad, "wavelength_nm")
    return TransmissionSpectrum(lam, np.array(t))


def write_spectrum_csv(spectrum: TransmissionSpectrum, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "transmission_dB"])
        for a, b in zip(spectrum.wavelength_nm, spectrum.transmission_dB):
            w.writerow([repr(float(a)), repr(float(b))])


RESONANCE_COLUMNS = [
    "mode_index_mu", "lambda0_nm", "fwhm_pm", "extinction_dB", "Q_loaded",
    "Q_intrinsic", "Q_external", "coupling", "t_min",
]


def write_resonances_csv(resonances, path_or_file):
    def _write(fh):
        w = csv.writer(fh)
        w.writerow(RESONANCE_COLUMNS)
        for r in resonances:
            d = r.as_dict()
            w.writerow(["" if d[c] is None else d[c] for c in RESONANCE_COLUMNS])

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with Path(path_or_file).open("w", newline="") as fh:
            _write(fh)


def resonances_to_json(resonances) -> str:
    return json.dumps([r.as_dict() for r in resonances], indent=2, sort_keys=True)
