"""Energy-time entanglement: folded Franson interferometer simulation,
fringe-visibility estimation and CHSH statistics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counts import ChannelPair, DetectorModel, detector_pair, saturate
from .errors import (
    FormatError,
    InsufficientPhaseCoverage,
    NegativeVisibility,
    SingularJacobian,
    ZeroTotalCounts,
)
from .fitcore import FitProblem, FitResult, fit_nlls, poisson_weights
from .timestamps import build_histogram, count_coincidences, detect, laplace_delays, poisson_times

SQRT2_2 = 2.0 * math.sqrt(2.0)
# with this many side windows the ACC estimate is averaged over
N_SIDE_WINDOWS = 10


@dataclass(frozen=True)
class FransonConfig:
    path_imbalance_ns: float = 7.0
    phase_total_rad: float = 0.0
    splitter_ratio: float = 0.5
    visibility_true: float = 1.0

    def __post_init__(self):
        if not 0 < self.splitter_ratio < 1:
            raise ValueError("splitter_ratio must be in (0, 1)")
        if not 0 <= self.visibility_true <= 1:
            raise ValueError("visibility_true must be in [0, 1]")
        if self.path_imbalance_ns <= 0:
            raise ValueError("path imbalance must be positive")

    def check_coherence(self, tau_c_ps):
        """Warn when the imbalance does not exceed the single-photon coherence time."""
        if self.path_imbalance_ns * 1e3 <= 10 * tau_c_ps:
            warnings.warn(
                f"path imbalance {self.path_imbalance_ns} ns is not much longer than "
                f"tau_c = {tau_c_ps} ps; single-photon interference expected",
                UserWarning,
            )

    @property
    def port_probabilities(self):
        """Per-photon probabilities of (short path, + port) and (long path, + port)."""
        r = self.splitter_ratio
        return (1 - r) ** 2, r**2


@dataclass
class FringeScan:
    phases: np.ndarray  # rad, or phase-shifter voltage
    cc_counts: np.ndarray
    acc_counts: np.ndarray
    singles_s_Hz: np.ndarray
    singles_i_Hz: np.ndarray
    duration_s: np.ndarray

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)
        n = len(self.phases)
        for name in ("cc_counts", "acc_counts", "singles_s_Hz", "singles_i_Hz"):
            v = np.asarray(getattr(self, name), dtype=float)
            if len(v) != n:
                raise ValueError(f"{name} has length {len(v)}, expected {n}")
            if np.any(v < 0):
                raise ValueError(f"{name} must be >= 0")
            setattr(self, name, v)
        self.duration_s = np.broadcast_to(np.asarray(self.duration_s, dtype=float), (n,)).copy()

    def __len__(self):
        return len(self.phases)


@dataclass
class VisibilityEstimate:
    V: float
    sigma_V: float
    phase_offset_rad: float = 0.0
    phase_scale: float = 1.0
    amplitude: float = 0.0
    phase_flipped: bool = False
    fit: FitResult | None = field(default=None, repr=False)


@dataclass(frozen=True)
class CHSHResult:
    S_max: float
    sigma_S: float
    n_sigma: float

    @property
    def n_sigma_floor(self):
        return math.floor(self.n_sigma)


@dataclass(frozen=True)
class EntanglementReport:
    channel: str
    V_raw: float
    V_raw_err: float
    V_net: float
    V_net_err: float
    S_max: float
    S_max_err: float
    n_sigma: float

    def __post_init__(self):
        if abs(self.S_max - SQRT2_2 * self.V_net) > 1e-9:
            raise ValueError("S_max must equal 2 sqrt(2) V_net")
        if self.S_max_err > 0 and abs(self.n_sigma - (self.S_max - 2) / self.S_max_err) > 1e-9:
            raise ValueError("n_sigma must equal (S_max - 2) / sigma_S")

    @classmethod
    def from_visibilities(cls, channel, raw: VisibilityEstimate, net: VisibilityEstimate):
        chsh = chsh_from_visibility(net.V, net.sigma_V)
        return cls(channel, raw.V, raw.sigma_V, net.V, net.sigma_V, chsh.S_max, chsh.sigma_S, chsh.n_sigma)

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- closed forms


def predict_fringe(cfg: FransonConfig, phase):
    """Relative central-peak coincidences at the (+,+) ports, ``1 + V cos(phase)``."""
    out = 1.0 + cfg.visibility_true * np.cos(np.asarray(phase, dtype=float))
    return out if np.ndim(out) else float(out)


def port_counts(total, V, phase):
    """Expected 2x2 coincidences ``[[++, +-], [-+, --]]`` following ``1 + ij V cos(phase)``."""
    c = V * math.cos(phase)
    q = total / 4.0
    return np.array([[q * (1 + c), q * (1 - c)], [q * (1 - c), q * (1 + c)]])


def correlation_coefficient(cc_by_port):
    """``E = sum_ij ij CC_ij / sum_ij CC_ij`` over ports ``[[++, +-], [-+, --]]``."""
    cc = np.asarray(cc_by_port, dtype=float)
    if cc.shape != (2, 2):
        raise ValueError("expected a 2x2 array of port counts")
    total = cc.sum()
    if total <= 0:
        raise ZeroTotalCounts("no coincidences in any port")
    return float((cc[0, 0] + cc[1, 1] - cc[0, 1] - cc[1, 0]) / total)


def chsh_s(E_ab, E_ab2, E_a2b, E_a2b2):
    """CHSH combination of four correlation coefficients.

    The sign of the subtracted term depends on how the analyser settings are
    labelled, so the largest of the four placements is returned.
    """
    E = np.array([E_ab, E_ab2, E_a2b, E_a2b2], dtype=float)
    return float(np.max(np.abs(E.sum() - 2.0 * E)))


def chsh_from_visibility(V, sigma_V=0.0) -> CHSHResult:
    """``S_max = 2 sqrt(2) V``, ``sigma_S = 2 sqrt(2) sigma_V`` and the violation in sigmas."""
    if not 0 <= V <= 1:
        raise ValueError("visibility must lie in [0, 1]")
    S = SQRT2_2 * V
    sS = SQRT2_2 * sigma_V
    n = (S - 2.0) / sS if sS > 0 else math.copysign(math.inf, S - 2.0) if S != 2.0 else 0.0
    return CHSHResult(S, sS, n)


def visibility_two_point(cc_max, cc_min, acc=0.0):
    """Extremum visibility with Poisson errors on the two raw counts.

    ``V = (M - m) / (M + m)`` after subtracting ``acc`` from both, and
    ``sigma_V = 2 sqrt(M m (M + m)) / (M + m)^2`` using the raw-count
    variances.
    """
    M, m = float(cc_max) - acc, float(cc_min) - acc
    if M + m <= 0:
        raise ZeroTotalCounts("extrema sum to zero")
    V = (M - m) / (M + m)
    var = (4 * m * m * float(cc_max) + 4 * M * M * float(cc_min)) / (M + m) ** 4
    return VisibilityEstimate(V, math.sqrt(var))


# ---------------------------------------------------------------- fringe fit


def _fringe_model(k_fixed):
    if k_fixed is not None:
        def model(p, x):
            return p[0] * (1 + p[1] * np.cos(k_fixed * x + p[2]))
    else:
        def model(p, x):
            return p[0] * (1 + p[1] * np.cos(p[3] * x + p[2]))
    return model


def _phase_start(x, y, k):
    # projection onto cos/sin gives amplitude and offset for a fixed scale
    c, s = np.cos(k * x), np.sin(k * x)
    A = np.column_stack([np.ones_like(x), c, s])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    a0, a1, a2 = coef
    V = math.hypot(a1, a2) / a0 if a0 > 0 else 0.0
    resid = float(np.sum((A @ coef - y) ** 2))
    return a0, min(V, 0.999), math.atan2(-a2, a1), resid


def _fit_fringe(model, x, y, sigma, p0, scale):
    try:
        return fit_nlls(FitProblem(model, x, y, 1.0 / sigma, p0, scale), max_iter=400)
    except SingularJacobian:
        # a flat fringe leaves the phase undefined: hold it and fit the rest
        if abs(p0[1]) > 1e-9:
            raise
        phi = p0[2]
        rest = [i for i in range(len(p0)) if i != 2]

        def fixed(q, xx):
            full = np.insert(np.asarray(q, dtype=float), 2, phi)
            return model(full, xx)

        sub = fit_nlls(FitProblem(fixed, x, y, 1.0 / sigma, [p0[i] for i in rest],
                                  [scale[i] for i in rest]), max_iter=400)
        params = np.insert(sub.params, 2, phi)
        cov = np.zeros((len(p0), len(p0)))
        cov[np.ix_(rest, rest)] = sub.covariance
        return FitResult(params, cov, sub.chi2_reduced, sub.n_iterations, sub.converged, sub.residuals, sub.dof)


def visibility_from_scan(scan: FringeScan, subtract_background=False, phase_unit="rad",
                         reweight=True) -> VisibilityEstimate:
    """Fit ``A (1 + V cos(k x + phi0))`` to the central-peak coincidences.

    ``phase_unit="rad"`` fixes ``k = 1``; ``"voltage"`` treats the abscissa as
    an uncalibrated phase-shifter setting and fits ``k`` as well.  With
    ``subtract_background`` the side-window accidental estimate is removed
    first (net visibility).  Weights are Poisson on the raw counts; with
    ``reweight`` a second pass takes them from the first-pass model.
    """
    x = scan.phases
    cc = scan.cc_counts
    acc = scan.acc_counts if subtract_background else np.zeros_like(cc)
    y = cc - acc
    if len(x) < 4:
        raise InsufficientPhaseCoverage("need at least 4 phase points")
    if np.all(y <= 0):
        raise ZeroTotalCounts("scan has no coincidences")
    # variance of the subtracted value: raw counts plus the mean of N side windows
    var_extra = acc / N_SIDE_WINDOWS
    if phase_unit == "rad":
        span = np.ptp(x)
        step = np.median(np.diff(np.sort(x))) if len(x) > 1 else 0.0
        if span + step < 2 * math.pi * (1 - 1e-9):
            raise InsufficientPhaseCoverage(f"phases span {span + step:.3f} rad < 2 pi")
        k_fixed = 1.0
        A0, V0, phi0, _ = _phase_start(x, y, 1.0)
        p0 = [A0, V0, phi0]
    elif phase_unit == "voltage":
        span = np.ptp(x)
        if span <= 0:
            raise InsufficientPhaseCoverage("all phase settings are equal")
        # grid over scales that put 1 to len/2 periods in the scan
        ks = 2 * math.pi / span * np.linspace(0.8, max(len(x) / 2.0, 1.0), 400)
        starts = [(_phase_start(x, y, k), k) for k in ks]
        (A0, V0, phi0, _), k0 = min(starts, key=lambda s: s[0][3])
        k_fixed = None
        p0 = [A0, V0, phi0, k0]
    else:
        raise ValueError("phase_unit must be 'rad' or 'voltage'")

    model = _fringe_model(k_fixed)
    # visibility and phase are order-one quantities whatever their start values
    scale = [max(abs(p0[0]), 1.0), 1.0, 1.0] + ([abs(p0[3])] if k_fixed is None else [])
    sigma = np.sqrt(np.maximum(cc, 1.0) + var_extra)
    res = _fit_fringe(model, x, y, sigma, p0, scale)
    if reweight:
        mu = np.maximum(model(res.params, x) + acc, 0.0)
        sigma = 1.0 / poisson_weights(mu)
        sigma = np.sqrt(sigma**2 + var_extra)
        res = _fit_fringe(model, x, y, sigma, res.params, scale)
    A, V, phi = res.params[:3]
    k = 1.0 if k_fixed is not None else float(res.params[3])
    if phase_unit == "voltage" and abs(k) * np.ptp(x) < 2 * math.pi * (1 - 1.0 / len(x)):
        raise InsufficientPhaseCoverage("scan covers less than one fringe period")
    flipped = V < 0
    if flipped:
        warnings.warn(f"fitted visibility {V:.4f} < 0; reporting |V| with a pi phase flip",
                      NegativeVisibility)
        V, phi = -V, phi + math.pi
    phi = (phi + math.pi) % (2 * math.pi) - math.pi
    return VisibilityEstimate(float(V), float(res.stderr[1]), float(phi), k, float(A), flipped, res)


def fringe_extrema(scan: FringeScan):
    """Largest and smallest coincidence counts of a scan, with their accidentals."""
    i, j = int(np.argmax(scan.cc_counts)), int(np.argmin(scan.cc_counts))
    return scan.cc_counts[i], scan.cc_counts[j], scan.acc_counts[i], scan.acc_counts[j]


# ---------------------------------------------------------------- simulation


def outcome_probabilities(cfg: FransonConfig, phase):
    """Joint port/path probabilities for a pair whose photons both reach the interferometer.

    Returns ``(pp_center, pp_sl, pp_ls, p_signal_only, p_idler_only)``: the
    central-peak (+,+) probability (SS and LL interfere), the two satellite
    (+,+) probabilities, and the (+,-) and (-,+) outcomes where only one
    photon reaches a detected port.  The remainder is (-,-).
    """
    a_s, a_l = cfg.port_probabilities
    q = a_s + a_l
    inter = 2 * cfg.visibility_true * a_s * a_l * math.cos(phase)
    center = a_s**2 + a_l**2 + inter
    side = a_s * a_l
    one = q * (1 - q) - inter
    return center, side, side, one, one


def simulate_franson_streams(cfg: FransonConfig, pair: ChannelPair, det: DetectorModel, R_PG, P_mW,
                             tau_c_ps, duration_s, seed):
    """Time-tag streams behind the '+' ports of the folded interferometer at ``cfg.phase_total_rad``.

    The satellite peaks sit at idler-minus-signal delays of +/- the path
    imbalance; the central peak carries the interference term.
    """
    rng = np.random.default_rng(seed)
    T = int(round(duration_s * 1e12))
    dt = int(round(cfg.path_imbalance_ns * 1e3))
    rate = R_PG * P_mW**2
    es, ei = pair.eta_signal, pair.eta_idler
    a_s, a_l = cfg.port_probabilities
    q = a_s + a_l
    center, sl, ls, s_only, i_only = outcome_probabilities(cfg, cfg.phase_total_rad)
    both = rate * es * ei

    sig, idl = [], []
    # central peak: SS or LL, both photons shifted together
    t = poisson_times(rng, both * center, T)
    long_path = rng.random(len(t)) < a_l**2 / (a_s**2 + a_l**2)
    t = t + dt * long_path
    d = laplace_delays(rng, tau_c_ps, len(t))
    sig.append(t)
    idl.append(t + d)
    # satellites: signal short / idler long, and the reverse
    for p, shift_s, shift_i in ((sl, 0, dt), (ls, dt, 0)):
        t = poisson_times(rng, both * p, T)
        sig.append(t + shift_s)
        idl.append(t + laplace_delays(rng, tau_c_ps, len(t)) + shift_i)
    # one photon of the pair at a detected port
    for p_one, rate_one, target, delay in (
        (s_only, both, sig, False),
        (i_only, both, idl, True),
        (q, rate * es * (1 - ei), sig, False),
        (q, rate * (1 - es) * ei, idl, True),
    ):
        t = poisson_times(rng, rate_one * p_one, T)
        t = t + dt * (rng.random(len(t)) < a_l / q)
        target.append(t + laplace_delays(rng, tau_c_ps, len(t)) if delay else t)
    # noise photons pass the interferometer like single photons; dark counts do not
    sig.append(poisson_times(rng, pair.raman_signal_Hz_per_mW * P_mW * q, T))
    ds, di = detector_pair(det)
    sig.append(poisson_times(rng, ds.dark_rate_Hz, T))
    idl.append(poisson_times(rng, pair.raman_idler_Hz_per_mW * P_mW * q, T))
    idl.append(poisson_times(rng, di.dark_rate_Hz, T))

    s = detect(rng, np.concatenate(sig).astype(np.float64), ds, T, 0, seed)
    i = detect(rng, np.concatenate(idl).astype(np.float64), di, T, 1, seed)
    return s, i


def simulate_franson_histogram(cfg: FransonConfig, pair: ChannelPair, det: DetectorModel, R_PG, P_mW,
                               tau_c_ps, duration_s, seed, bin_width_ps=50, span_ps=None):
    """Delay histogram of the '+' port streams: central peak at zero, satellites at +/- the imbalance."""
    dt = int(round(cfg.path_imbalance_ns * 1e3))
    if span_ps is None:
        span_ps = 2 * dt + 40 * int(bin_width_ps)
        span_ps += int(bin_width_ps) - span_ps % int(bin_width_ps) if span_ps % int(bin_width_ps) else 0
    s, i = simulate_franson_streams(cfg, pair, det, R_PG, P_mW, tau_c_ps, duration_s, seed)
    return build_histogram(s, i, bin_width_ps, span_ps)


def _point_seed(seed, index):
    return np.random.SeedSequence([int(seed), int(index)])


def simulate_franson_scan(cfg: FransonConfig, pair: ChannelPair, det: DetectorModel, phases,
                          duration_per_point_s, R_PG, P_mW, tau_c_ps, window_ps, seed) -> FringeScan:
    """Phase scan built from simulated time tags, one independent seed per point."""
    cfg.check_coherence(tau_c_ps)
    dt = int(round(cfg.path_imbalance_ns * 1e3))
    cc, acc, ss, si = [], [], [], []
    for idx, phi in enumerate(np.asarray(phases, dtype=float)):
        point = FransonConfig(cfg.path_imbalance_ns, float(phi), cfg.splitter_ratio, cfg.visibility_true)
        s, i = simulate_franson_streams(point, pair, det, R_PG, P_mW, tau_c_ps, duration_per_point_s,
                                        _point_seed(seed, idx))
        r = count_coincidences(s, i, window_ps, 0, exclude_delays_ps=(dt, -dt))
        cc.append(r.CC)
        acc.append(r.ACC)
        ss.append(len(s) / duration_per_point_s)
        si.append(len(i) / duration_per_point_s)
    return FringeScan(phases, cc, acc, ss, si, duration_per_point_s)


def expected_scan_rates(cfg: FransonConfig, pair: ChannelPair, det: DetectorModel, R_PG, P_mW,
                        window_s, phases):
    """Mean central-window coincidence and accidental rates (Hz) and singles, before dead time.

    Assumes the window captures the whole correlation peak.
    """
    a_s, a_l = cfg.port_probabilities
    q = a_s + a_l
    rate = R_PG * P_mW**2
    both = rate * pair.eta_signal * pair.eta_idler
    phases = np.asarray(phases, dtype=float)
    center = np.array([outcome_probabilities(cfg, p)[0] for p in phases])
    ds, di = detector_pair(det)
    ns = rate * pair.eta_signal * q + pair.raman_signal_Hz_per_mW * P_mW * q + ds.dark_rate_Hz
    ni = rate * pair.eta_idler * q + pair.raman_idler_Hz_per_mW * P_mW * q + di.dark_rate_Hz
    acc = ns * ni * window_s
    return both * center + acc, acc, ns, ni


def simulate_franson_scan_counts(cfg: FransonConfig, pair: ChannelPair, det: DetectorModel, phases,
                                 duration_per_point_s, R_PG, P_mW, window_s, seed) -> FringeScan:
    """Phase scan sampled directly from the mean rates, for long integrations.

    Same rate model as :func:`simulate_franson_streams`.  Dead time enters
    as the live fraction ``1/(1 + tau N)`` of each detector, applied to the
    singles and, as a product, to the true coincidences.  Accidentals are
    ``SC_s SC_i t`` and the side-window estimate is the mean of
    ``N_SIDE_WINDOWS`` independent Poisson draws.
    """
    ds, di = detector_pair(det)
    ideal = FransonConfig(cfg.path_imbalance_ns, 0.0, cfg.splitter_ratio, cfg.visibility_true)
    cc_rate, _, ns, ni = expected_scan_rates(ideal, pair, det, R_PG, P_mW, window_s, phases)
    live_s, live_i = 1 / (1 + ds.dead_time_s * ns), 1 / (1 + di.dead_time_s * ni)
    sc_s, sc_i = saturate(ns, ds.dead_time_s), saturate(ni, di.dead_time_s)
    acc = sc_s * sc_i * window_s
    true = (cc_rate - ns * ni * window_s) * live_s * live_i
    T = float(duration_per_point_s)
    n = len(np.atleast_1d(phases))
    cc, acc_est, ss, si = [], [], [], []
    for idx in range(n):
        rng = np.random.default_rng(_point_seed(seed, idx))
        cc.append(rng.poisson((true[idx] + acc) * T))
        acc_est.append(rng.poisson(acc * T, size=N_SIDE_WINDOWS).mean())
        ss.append(rng.poisson(sc_s * T) / T)
        si.append(rng.poisson(sc_i * T) / T)
    return FringeScan(phases, cc, acc_est, ss, si, T)


# ---------------------------------------------------------------- I/O

SCAN_COLUMNS = ["phase_rad_or_voltage", "cc", "acc", "singles_s", "singles_i", "duration_s"]


def write_scan_csv(scan: FringeScan, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_COLUMNS)
        for row in zip(scan.phases, scan.cc_counts, scan.acc_counts, scan.singles_s_Hz,
                       scan.singles_i_Hz, scan.duration_s):
            w.writerow([repr(float(v)) for v in row])


def read_scan_csv(path) -> FringeScan:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != SCAN_COLUMNS:
            raise FormatError(f"expected header {','.join(SCAN_COLUMNS)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(SCAN_COLUMNS):
                raise FormatError(f"expected {len(SCAN_COLUMNS)} columns", path, lineno)
            vals = []
            for name, raw in zip(SCAN_COLUMNS, row):
                try:
                    v = float(raw)
                except ValueError:
                    raise FormatError(f"not a number: {raw!r}", path, lineno, name) from None
                if name != SCAN_COLUMNS[0] and (v < 0 or not math.isfinite(v)):
                    raise FormatError("counts and rates must be finite and >= 0", path, lineno, name)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise FormatError("no data rows", path)
    a = np.array(rows)
    return FringeScan(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5])
