"""Count-rate algebra for a pair source: singles with Raman noise and dark
counts, detector dead time, coincidences and accidentals, CAR, and the
pair-rate estimator R_PG = R_s R_i / R_CC from pump-power sweeps.

Rates are in Hz, pump powers in mW, and R_PG in Hz/mW^2.  The collection
efficiencies ``eta`` are end-to-end, so they already contain the detector
efficiency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import units
from .errors import FormatError, NegativeQuadraticTerm, SaturationExceeded
from .fitcore import FitResult, fit_polynomial

DEFAULT_BANDWIDTH_PM = 15.0


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.25
    dark_rate_Hz: float = 1600.0
    dead_time_s: float = 10e-6
    jitter_sigma_ps: float = 50.0

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must be in (0, 1]")
        if min(self.dark_rate_Hz, self.dead_time_s, self.jitter_sigma_ps) < 0:
            raise ValueError("rates and durations must be >= 0")


@dataclass(frozen=True)
class LossChain:
    entries: tuple  # ((name, loss_dB), ...)

    def __post_init__(self):
        entries = tuple((str(n), float(v)) for n, v in self.entries)
        if any(v < 0 for _, v in entries):
            raise ValueError("losses are given as positive dB")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_mapping(cls, mapping):
        return cls(tuple((k.removesuffix("_dB"), v) for k, v in mapping.items()))

    @property
    def total_dB(self):
        return math.fsum(v for _, v in self.entries)

    @property
    def transmittance(self):
        return units.db_to_linear(self.total_dB)


def detector_pair(det):
    """``(signal, idler)`` detectors from one shared model or a 2-tuple."""
    if isinstance(det, DetectorModel):
        return det, det
    ds, di = det
    return ds, di


def loss_budget(chain: LossChain):
    if not chain.entries:
        raise ValueError("empty loss chain")
    return {"total_dB": chain.total_dB, "transmittance": chain.transmittance}


@dataclass(frozen=True)
class ChannelPair:
    name: str
    lambda_signal_nm: float
    lambda_idler_nm: float
    eta_signal: float
    eta_idler: float
    raman_signal_Hz_per_mW: float = 0.0
    raman_idler_Hz_per_mW: float = 0.0
    bandwidth_pm: float = DEFAULT_BANDWIDTH_PM

    def __post_init__(self):
        for eta in (self.eta_signal, self.eta_idler):
            if not 0 < eta <= 1:
                raise ValueError(f"{self.name}: transmittance must be in (0, 1]")
        if min(self.raman_signal_Hz_per_mW, self.raman_idler_Hz_per_mW) < 0:
            raise ValueError(f"{self.name}: Raman rates must be >= 0")
        if self.bandwidth_pm <= 0:
            raise ValueError(f"{self.name}: bandwidth must be positive")


@dataclass
class PowerSweep:
    powers_mW: np.ndarray
    singles_s_Hz: np.ndarray
    singles_i_Hz: np.ndarray
    cc_counts: np.ndarray
    duration_s: np.ndarray
    window_ns: float
    acc_counts: np.ndarray | None = None  # side-window estimate, data mode only

    def __post_init__(self):
        self.powers_mW = np.asarray(self.powers_mW, dtype=float)
        n = len(self.powers_mW)
        self.singles_s_Hz = np.asarray(self.singles_s_Hz, dtype=float)
        self.singles_i_Hz = np.asarray(self.singles_i_Hz, dtype=float)
        self.cc_counts = np.asarray(self.cc_counts, dtype=float)
        self.duration_s = np.broadcast_to(np.asarray(self.duration_s, dtype=float), (n,)).copy()
        if self.acc_counts is not None:
            self.acc_counts = np.asarray(self.acc_counts, dtype=float)
        arrays = [self.singles_s_Hz, self.singles_i_Hz, self.cc_counts]
        if self.acc_counts is not None:
            arrays.append(self.acc_counts)
        if any(len(a) != n for a in arrays):
            raise ValueError("power sweep columns have different lengths")
        if n > 1 and np.any(np.diff(self.powers_mW) <= 0):
            raise ValueError("powers must be strictly increasing")
        if np.any(self.duration_s <= 0) or self.window_ns <= 0:
            raise ValueError("durations and coincidence window must be positive")


# ---------------------------------------------------------------- forward model


def saturate(rate_Hz, dead_time_s):
    """Non-paralyzable dead time: observed = N / (1 + tau N)."""
    n = np.asarray(rate_Hz, dtype=float)
    out = n / (1.0 + dead_time_s * n)
    return out if out.ndim else float(out)


def correct_dead_time(measured_Hz, dead_time_s):
    """Invert :func:`saturate`: N = SC / (1 - tau SC)."""
    sc = np.asarray(measured_Hz, dtype=float)
    if np.any(sc * dead_time_s >= 1.0):
        raise SaturationExceeded(f"count rate reaches 1/dead_time = {1 / dead_time_s:.4g} Hz")
    out = sc / (1.0 - dead_time_s * sc)
    return out if out.ndim else float(out)


def raw_singles(eta, R_PG, raman_Hz_per_mW, dark_Hz, P_mW):
    """Pre-saturation singles ``eta R_PG P^2 + R_RS P + DC``."""
    P = np.asarray(P_mW, dtype=float)
    out = eta * R_PG * P**2 + raman_Hz_per_mW * P + dark_Hz
    return out if out.ndim else float(out)


def predict_singles(pair: ChannelPair, det: DetectorModel, R_PG, P_mW):
    """Observed (signal, idler) singles rates after dead-time saturation."""
    if np.any(np.asarray(P_mW) < 0):
        raise ValueError("pump power must be >= 0")
    ds, di = detector_pair(det)
    ns = raw_singles(pair.eta_signal, R_PG, pair.raman_signal_Hz_per_mW, ds.dark_rate_Hz, P_mW)
    ni = raw_singles(pair.eta_idler, R_PG, pair.raman_idler_Hz_per_mW, di.dark_rate_Hz, P_mW)
    return saturate(ns, ds.dead_time_s), saturate(ni, di.dead_time_s)


def car(cc, acc):
    cc = np.asarray(cc, dtype=float)
    acc = np.asarray(acc, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(acc > 0, (cc - acc) / np.where(acc > 0, acc, 1.0), np.inf)
    return out if out.ndim else float(out)


def predict_coincidences(pair: ChannelPair, det: DetectorModel, R_PG, P_mW, window_s):
    """Coincidence, accidental rates (Hz) and CAR.

    ``ACC = SC_s SC_i t_cc`` and ``CC = eta_s eta_i R_PG P^2 + ACC``.
    """
    if window_s <= 0:
        raise ValueError("coincidence window must be positive")
    sc_s, sc_i = predict_singles(pair, det, R_PG, P_mW)
    acc = np.asarray(sc_s) * np.asarray(sc_i) * window_s
    true = pair.eta_signal * pair.eta_idler * R_PG * np.asarray(P_mW, dtype=float) ** 2
    cc = true + acc
    if np.ndim(cc) == 0:
        cc, acc = float(cc), float(acc)
    return {"CC": cc, "ACC": acc, "CAR": car(cc, acc)}


def brightness(R_PG_Hz_per_mW2, bandwidth_pm=DEFAULT_BANDWIDTH_PM):
    """Spectral brightness in GHz mW^-2 nm^-1."""
    if bandwidth_pm <= 0:
        raise ValueError("bandwidth must be positive")
    return R_PG_Hz_per_mW2 / (bandwidth_pm * 1e-3) / 1e9


def simulate_power_sweep(pair, det, R_PG, powers_mW, duration_s, window_s, rng):
    """Poisson-sampled counts from the rate model at each pump power."""
    rng = np.random.default_rng(rng)
    P = np.asarray(powers_mW, dtype=float)
    sc_s, sc_i = predict_singles(pair, det, R_PG, P)
    cc = predict_coincidences(pair, det, R_PG, P, window_s)["CC"]
    T = float(duration_s)
    return PowerSweep(
        powers_mW=P,
        singles_s_Hz=rng.poisson(np.asarray(sc_s) * T) / T,
        singles_i_Hz=rng.poisson(np.asarray(sc_i) * T) / T,
        cc_counts=rng.poisson(np.asarray(cc) * T).astype(float),
        duration_s=T,
        window_ns=window_s * 1e9,
    )


def noiseless_power_sweep(pair, det, R_PG, powers_mW, duration_s, window_s):
    P = np.asarray(powers_mW, dtype=float)
    sc_s, sc_i = predict_singles(pair, det, R_PG, P)
    cc = predict_coincidences(pair, det, R_PG, P, window_s)["CC"]
    return PowerSweep(P, sc_s, sc_i, np.asarray(cc) * duration_s, duration_s, window_s * 1e9)


# ---------------------------------------------------------------- inverse


@dataclass
class PairRateEstimate:
    R_s: float
    R_i: float
    R_CC: float
    R_PG: float
    R_s_err: float
    R_i_err: float
    R_CC_err: float
    R_PG_err: float
    fits: dict = field(repr=False, default_factory=dict)

    @property
    def covariances(self):
        return {k: v.covariance for k, v in self.fits.items()}

    @property
    def eta_signal(self):
        return self.R_s / self.R_PG

    @property
    def eta_idler(self):
        return self.R_i / self.R_PG


def _quadratic(name, P, y, sigma) -> FitResult:
    res = fit_polynomial(P, y, 1.0 / sigma, degree=2)
    if res.params[2] <= 0:
        raise NegativeQuadraticTerm(f"{name}: quadratic coefficient {res.params[2]:.4g} <= 0")
    return res


def extract_R_PG(sweep: PowerSweep, det: DetectorModel) -> PairRateEstimate:
    """Pair generation rate from a power sweep.

    Singles are dead-time corrected and fitted to ``c + bP + aP^2`` with
    Poisson weights; the coincidences have accidentals removed (side-window
    counts when the sweep carries them, the ``SC_s SC_i t_cc`` model
    otherwise) and get the same quadratic fit.  The three quadratic
    coefficients combine as ``R_PG = R_s R_i / R_CC``, with first-order
    error propagation.
    """
    if len(sweep.powers_mW) < 4:
        raise ValueError("need at least 4 pump powers")
    P = sweep.powers_mW
    T = sweep.duration_s
    fits = {}
    for arm, sc, d in zip(("signal", "idler"), (sweep.singles_s_Hz, sweep.singles_i_Hz), detector_pair(det)):
        tau = d.dead_time_s
        n = correct_dead_time(sc, tau)
        sigma_sc = np.sqrt(np.maximum(sc * T, 1.0)) / T
        sigma_n = sigma_sc / (1.0 - tau * sc) ** 2
        fits[arm] = _quadratic(arm, P, n, sigma_n)
    if sweep.acc_counts is not None:
        acc = sweep.acc_counts / T
    else:
        acc = sweep.singles_s_Hz * sweep.singles_i_Hz * sweep.window_ns * 1e-9
    net = sweep.cc_counts / T - acc
    sigma_cc = np.sqrt(np.maximum(sweep.cc_counts, 1.0)) / T
    fits["coincidence"] = _quadratic("coincidence", P, net, sigma_cc)

    R_s, R_i, R_cc = (fits[k].params[2] for k in ("signal", "idler", "coincidence"))
    e_s, e_i, e_cc = (fits[k].stderr[2] for k in ("signal", "idler", "coincidence"))
    R_pg = R_s * R_i / R_cc
    rel = math.sqrt((e_s / R_s) ** 2 + (e_i / R_i) ** 2 + (e_cc / R_cc) ** 2)
    return PairRateEstimate(R_s, R_i, R_cc, R_pg, e_s, e_i, e_cc, R_pg * rel, fits)


# ---------------------------------------------------------------- I/O

SWEEP_COLUMNS = ["power_mW", "singles_s_Hz", "singles_i_Hz", "cc_counts", "duration_s"]


def write_power_sweep_csv(sweep: PowerSweep, path):
    cols = SWEEP_COLUMNS + (["acc_counts"] if sweep.acc_counts is not None else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(len(sweep.powers_mW)):
            row = [sweep.powers_mW[k], sweep.singles_s_Hz[k], sweep.singles_i_Hz[k],
                   sweep.cc_counts[k], sweep.duration_s[k]]
            if sweep.acc_counts is not None:
                row.append(sweep.acc_counts[k])
            w.writerow([repr(float(v)) for v in row])


def read_power_sweep_csv(path, window_ns) -> PowerSweep:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:5] != SWEEP_COLUMNS:
            raise FormatError(f"expected header {','.join(SWEEP_COLUMNS)}", path, 1)
        has_acc = len(header) > 5 and header[5] == "acc_counts"
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < len(header):
                raise FormatError(f"expected {len(header)} columns", path, lineno)
            vals = []
            for name, raw in zip(header, row):
                try:
                    vals.append(float(raw))
                except ValueError:
                    raise FormatError(f"not a number: {raw!r}", path, lineno, name) from None
            if rows and vals[0] <= rows[-1][0]:
                raise FormatError("power column must be strictly increasing", path, lineno, "power_mW")
            if vals[4] <= 0:
                raise FormatError("duration must be positive", path, lineno, "duration_s")
            rows.append(vals)
    if not rows:
        raise FormatError("no data rows", path)
    a = np.array(rows)
    return PowerSweep(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], window_ns,
                      a[:, 5] if has_acc else None)
