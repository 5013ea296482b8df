"""Photon time-tag streams: Monte Carlo generation, coincidence counting,
correlation histograms and the coherence-time fit.

Time stamps are unsigned 64-bit integer picoseconds.  The counting kernels
walk both sorted streams once with two monotone pointers, so a pass costs
O(n_a + n_b) plus the number of pairs inside the window.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.optimize import brentq
from scipy.special import erfc, erfcx, ndtr

from .counts import ChannelPair, DetectorModel, detector_pair
from .errors import EmptyStream, FitDiverged, FitError, FormatError, InvalidSeed, JitterDominates
from .fitcore import FitProblem, FitResult, fit_nlls, poisson_weights

MAGIC = b"QTS1"
_HEADER = struct.Struct("<4sHQQQ")
NO_SEED = 0xFFFF_FFFF_FFFF_FFFF
N_SIDE_WINDOWS = 10


@dataclass
class TimestampStream:
    channel_id: int
    times_ps: np.ndarray
    duration_ps: int
    seed: int | None = None

    def __post_init__(self):
        self.times_ps = np.ascontiguousarray(self.times_ps, dtype=np.uint64)
        self.duration_ps = int(self.duration_ps)
        if len(self.times_ps):
            if np.any(self.times_ps[1:] < self.times_ps[:-1]):
                raise ValueError("time stamps must be non-decreasing")
            if int(self.times_ps[-1]) >= self.duration_ps:
                raise ValueError("time stamps must be < duration")

    def __len__(self):
        return len(self.times_ps)

    @property
    def rate_Hz(self):
        return len(self) / (self.duration_ps * 1e-12) if self.duration_ps else 0.0


@dataclass
class CorrelationHistogram:
    bin_width_ps: int
    delays_ps: np.ndarray  # bin centres
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.bin_width_ps != other.bin_width_ps or not np.array_equal(self.delays_ps, other.delays_ps):
            raise ValueError("histograms have different binning")
        return CorrelationHistogram(self.bin_width_ps, self.delays_ps, self.counts + other.counts)


@dataclass
class CoincidenceResult:
    CC: int
    ACC: float
    CAR: float
    side_counts: np.ndarray = field(repr=False)
    window_ps: int = 0
    center_delay_ps: int = 0


@dataclass
class CoherenceFit:
    tau_c_ps: float
    uncertainty_ps: float
    t0_ps: float
    area: float
    background_per_bin: float
    jitter_dominated: bool
    fit: FitResult = field(repr=False)


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _count_in_window(a, b, lo, hi):
    # pairs with lo <= b[j] - a[k] <= hi
    nb = b.shape[0]
    jl = 0
    jh = 0
    total = 0
    for k in range(a.shape[0]):
        t = a[k]
        while jl < nb and b[jl] - t < lo:
            jl += 1
        if jh < jl:
            jh = jl
        while jh < nb and b[jh] - t <= hi:
            jh += 1
        total += jh - jl
    return total


@njit(cache=True)
def _histogram_kernel(a, b, span, bw, nbins):
    counts = np.zeros(nbins, dtype=np.int64)
    nb = b.shape[0]
    jl = 0
    for k in range(a.shape[0]):
        t = a[k]
        # keep 2 d >= -span
        while jl < nb and 2 * (b[jl] - t) < -span:
            jl += 1
        j = jl
        while j < nb:
            d2 = 2 * (b[j] - t)
            if d2 > span:
                break
            m = (d2 + span) // (2 * bw)
            if m >= nbins:
                m = nbins - 1
            counts[m] += 1
            j += 1
    return counts


@njit(cache=True)
def _dead_time_mask(t, dead):
    keep = np.zeros(t.shape[0], dtype=np.bool_)
    last = 0
    have = False
    for k in range(t.shape[0]):
        if not have or t[k] - last >= dead:
            keep[k] = True
            last = t[k]
            have = True
    return keep


def _as_i64(stream):
    times = stream.times_ps if isinstance(stream, TimestampStream) else np.asarray(stream)
    return np.ascontiguousarray(times, dtype=np.int64)


# ---------------------------------------------------------------- counting


def side_window_offsets(window_ps, n=N_SIDE_WINDOWS, exclude_ps=()):
    """Deterministic accidental windows: alternating sides, starting two
    window widths from the peak and stepping by one width, skipping any offset
    within two widths of an excluded delay (e.g. Franson side peaks)."""
    out = []
    k = 2
    excl = [abs(int(e)) for e in exclude_ps]
    while len(out) < n:
        off = k * int(window_ps)
        if all(abs(off - e) >= 2 * window_ps for e in excl if e):
            out.extend([off, -off])
        k += 1
    return out[:n]


def count_window(a, b, lo_ps, hi_ps):
    """Number of pairs with ``lo <= t_b - t_a <= hi`` (integer ps, inclusive)."""
    return int(_count_in_window(_as_i64(a), _as_i64(b), int(lo_ps), int(hi_ps)))


def count_coincidences(a, b, window_ps, center_delay_ps=0, side_offsets_ps=None, exclude_delays_ps=()):
    """Coincidences of ``b`` relative to ``a`` in a window centred on ``center_delay_ps``.

    A pair counts when ``|t_b - t_a - center| <= window/2``.  Accidentals are
    the mean count in ``N_SIDE_WINDOWS`` equal-width windows displaced from the
    centre (see :func:`side_window_offsets`), and ``CAR = (CC - ACC) / ACC``.
    """
    ai, bi = _as_i64(a), _as_i64(b)
    if len(ai) == 0 or len(bi) == 0:
        raise EmptyStream("cannot count coincidences on an empty stream")
    window_ps = int(window_ps)
    if window_ps < 1:
        raise ValueError("window must be at least 1 ps")
    half = window_ps // 2
    c = int(center_delay_ps)
    cc = int(_count_in_window(ai, bi, c - half, c + half))
    if side_offsets_ps is None:
        side_offsets_ps = side_window_offsets(window_ps, exclude_ps=[e - c for e in exclude_delays_ps])
    side = np.array([_count_in_window(ai, bi, c + o - half, c + o + half) for o in side_offsets_ps], dtype=np.int64)
    acc = float(side.mean()) if len(side) else 0.0
    car = (cc - acc) / acc if acc > 0 else math.inf
    return CoincidenceResult(cc, acc, car, side, window_ps, c)


def brute_force_coincidences(a, b, window_ps, center_delay_ps=0):
    """O(n_a n_b) reference count, for tests and audits."""
    ai = np.asarray(a.times_ps if isinstance(a, TimestampStream) else a, dtype=np.int64)
    bi = np.asarray(b.times_ps if isinstance(b, TimestampStream) else b, dtype=np.int64)
    d = bi[None, :] - ai[:, None] - int(center_delay_ps)
    return int(np.count_nonzero(2 * np.abs(d) <= int(window_ps)))


def build_histogram(a, b, bin_width_ps, span_ps) -> CorrelationHistogram:
    """Histogram of ``t_b - t_a`` over ``[-span/2, span/2]``.

    ``span/bin_width`` bins with edges at ``-span/2 + m*bin_width``; an odd
    bin count puts a bin centre at zero delay.
    """
    bw, span = int(bin_width_ps), int(span_ps)
    if bw < 1 or span < bw or span % bw:
        raise ValueError("bin width must divide span")
    ai, bi = _as_i64(a), _as_i64(b)
    if len(ai) == 0 or len(bi) == 0:
        raise EmptyStream("cannot histogram an empty stream")
    nbins = span // bw
    counts = _histogram_kernel(ai, bi, span, bw, nbins)
    centers = -span / 2 + bw * (np.arange(nbins) + 0.5)
    return CorrelationHistogram(bw, centers, counts)


# ---------------------------------------------------------------- simulation


class SeedRegistry:
    """Remembers which parameters each seed was used with and refuses reuse with different ones."""

    def __init__(self):
        self._seen = {}

    def check(self, seed, params):
        digest = hashlib.sha256(json.dumps(params, sort_keys=True, default=repr).encode()).hexdigest()
        prev = self._seen.setdefault(seed, digest)
        if prev != digest:
            raise InvalidSeed(f"seed {seed} already used with different parameters")


def poisson_times(rng, rate_Hz, duration_ps):
    """Homogeneous Poisson arrivals on [0, duration), sorted integer ps."""
    n = rng.poisson(max(rate_Hz, 0.0) * duration_ps * 1e-12)
    return np.sort(rng.integers(0, duration_ps, size=n, dtype=np.int64))


def laplace_delays(rng, tau_ps, n):
    """Signal-idler delays with the two-sided exponential correlation shape."""
    if tau_ps <= 0:
        return np.zeros(n)
    return rng.laplace(0.0, tau_ps, size=n)


def detect(rng, times_ps, det: DetectorModel, duration_ps, channel_id=0, seed=None) -> TimestampStream:
    """Jitter, crop to the record, sort and apply non-paralyzable dead time."""
    t = np.asarray(times_ps, dtype=np.float64)
    if det.jitter_sigma_ps > 0 and len(t):
        t = t + rng.normal(0.0, det.jitter_sigma_ps, size=len(t))
    t = np.rint(t).astype(np.int64)
    t = np.sort(t[(t >= 0) & (t < duration_ps)])
    dead = int(round(det.dead_time_s * 1e12))
    if dead > 0 and len(t):
        t = t[_dead_time_mask(t, dead)]
    return TimestampStream(channel_id, t.astype(np.uint64), duration_ps, seed)


def simulate_pair_streams(pair: ChannelPair, det: DetectorModel, R_PG, P_mW, tau_c_ps,
                          duration_s, seed, registry: SeedRegistry | None = None):
    """Monte Carlo signal and idler click streams.

    Pairs are emitted as a Poisson process of rate ``R_PG P^2``; the idler
    trails the signal by a two-sided exponential delay of scale ``tau_c``,
    each photon survives independently with its arm's ``eta``, Raman and dark
    clicks are independent Poisson streams, Gaussian jitter is added per
    detector and dead time is applied last.  Survival is sampled by Poisson
    thinning (both / signal-only / idler-only pair classes are independent
    Poisson processes), which keeps the cost proportional to detected clicks.
    """
    if registry is not None:
        registry.check(seed, dict(pair=repr(pair), det=repr(det), R_PG=R_PG, P=P_mW,
                                  tau=tau_c_ps, T=duration_s))
    rng = np.random.default_rng(seed)
    T = int(round(duration_s * 1e12))
    rate = R_PG * P_mW**2
    es, ei = pair.eta_signal, pair.eta_idler
    both = poisson_times(rng, rate * es * ei, T)
    s_only = poisson_times(rng, rate * es * (1 - ei), T)
    i_only = poisson_times(rng, rate * (1 - es) * ei, T)
    delays = laplace_delays(rng, tau_c_ps, len(both))
    ds, di = detector_pair(det)
    noise_s = poisson_times(rng, pair.raman_signal_Hz_per_mW * P_mW + ds.dark_rate_Hz, T)
    noise_i = poisson_times(rng, pair.raman_idler_Hz_per_mW * P_mW + di.dark_rate_Hz, T)
    sig = np.concatenate([both, s_only, noise_s]).astype(np.float64)
    idl = np.concatenate([both + delays, i_only, noise_i])
    s = detect(rng, sig, ds, T, 0, seed)
    i = detect(rng, idl, di, T, 1, seed)
    return s, i


# ---------------------------------------------------------------- coherence time


def _g(t, s, tau):
    # exp(s^2/2tau^2 - t/tau) * erfc((s/tau - t/s)/sqrt 2), evaluated without overflow
    u = (s / tau - t / s) / math.sqrt(2.0)
    pos = u >= 0
    out = np.empty_like(t)
    out[pos] = np.exp(-t[pos] ** 2 / (2 * s * s)) * erfcx(u[pos])
    out[~pos] = np.exp(s * s / (2 * tau * tau) - t[~pos] / tau) * erfc(u[~pos])
    return out


def exp_gauss_density(t_ps, tau_ps, sigma_ps):
    """Unit-area two-sided exponential (scale tau) convolved with a Gaussian of rms sigma."""
    t = np.asarray(t_ps, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    if sigma_ps == 0:
        out = np.exp(-np.abs(t) / tau_ps) / (2 * tau_ps)
    else:
        out = (_g(t, sigma_ps, tau_ps) + _g(-t, sigma_ps, tau_ps)) / (4 * tau_ps)
    return float(out[0]) if scalar else out


def exp_gauss_cdf(t_ps, tau_ps, sigma_ps):
    t = np.atleast_1d(np.asarray(t_ps, dtype=float))
    if sigma_ps == 0:
        e = np.exp(-np.abs(t) / tau_ps)
        return np.where(t >= 0, 1.0 - 0.5 * e, 0.5 * e)
    return ndtr(t / sigma_ps) - 0.25 * _g(t, sigma_ps, tau_ps) + 0.25 * _g(-t, sigma_ps, tau_ps)


def convolved_fwhm(tau_ps, sigma_ps):
    """Full width at half maximum of :func:`exp_gauss_density`."""
    peak = exp_gauss_density(0.0, tau_ps, sigma_ps)
    upper = 10 * (tau_ps + sigma_ps)
    return 2 * brentq(lambda t: exp_gauss_density(t, tau_ps, sigma_ps) - 0.5 * peak, 0.0, upper, xtol=1e-10)


def _histogram_model(sigma, bw):
    def model(p, x):
        area, t0, tau, bg = p
        tau = abs(tau)
        lo = exp_gauss_cdf(x - 0.5 * bw - t0, tau, sigma)
        hi = exp_gauss_cdf(x + 0.5 * bw - t0, tau, sigma)
        return area * (hi - lo) + bg

    return model


def fit_coherence_time(h: CorrelationHistogram, sigma_jitter_ps, reweight=True) -> CoherenceFit:
    """Fit the coincidence peak with a bin-integrated exponential (x) Gaussian.

    ``sigma_jitter_ps`` is the rms of the Gaussian timing response of the
    delay measurement (for two detectors of rms jitter s each, s*sqrt(2)).
    Free parameters: peak area, peak position, coherence time and a flat
    background.  With ``reweight`` a second pass uses Poisson weights from
    the first-pass model, which removes the low-count bias of data weights.
    """
    x = np.asarray(h.delays_ps, dtype=float)
    y = np.asarray(h.counts, dtype=float)
    if y.sum() <= 0:
        raise FitDiverged("empty histogram")
    edge = max(1, len(y) // 10)
    bg0 = float(np.median(np.concatenate([y[:edge], y[-edge:]])))
    k = int(np.argmax(y))
    area0 = max(float((y - bg0).sum()), 1.0)
    above = np.nonzero(y - bg0 >= 0.5 * (y[k] - bg0))[0]
    fwhm = max((above[-1] - above[0] + 1) * h.bin_width_ps, h.bin_width_ps)
    tau0 = max(fwhm / (2 * math.log(2)) - sigma_jitter_ps, fwhm / 4, 1.0)
    model = _histogram_model(float(sigma_jitter_ps), float(h.bin_width_ps))
    p0 = [area0, float(x[k]), tau0, max(bg0, 0.0)]
    try:
        res = fit_nlls(FitProblem(model, x, y, poisson_weights(y), p0), max_iter=400, tol_rel=1e-9)
        if reweight:
            mu = model(res.params, x)
            res = fit_nlls(FitProblem(model, x, y, poisson_weights(mu), res.params), max_iter=400, tol_rel=1e-9)
    except FitError as exc:
        raise FitDiverged(f"coherence-time fit failed: {exc}") from exc
    area, t0, tau, bg = res.params
    tau = abs(tau)
    if not res.converged or not math.isfinite(tau) or tau <= 0:
        raise FitDiverged("coherence-time fit did not converge")
    dominated = sigma_jitter_ps > 5 * tau
    if dominated:
        warnings.warn(f"jitter {sigma_jitter_ps} ps exceeds 5 tau_c = {5 * tau:.1f} ps; tau_c unreliable",
                      JitterDominates)
    return CoherenceFit(float(tau), float(res.stderr[2]), float(t0), float(area), float(bg), dominated, res)


# ---------------------------------------------------------------- I/O


def write_qts(stream: TimestampStream, path):
    t = stream.times_ps
    deltas = np.diff(t, prepend=np.uint64(0)).astype("<u8") if len(t) else np.zeros(0, "<u8")
    seed = NO_SEED if stream.seed is None else int(stream.seed)
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, int(stream.channel_id), len(t), int(stream.duration_ps), seed))
        fh.write(deltas.tobytes())


def read_qts(path) -> TimestampStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", path, field="header")
    magic, channel, count, duration, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, field="magic")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise FormatError(f"expected {count} stamps, found {len(body) / 8:g}", path, field="count")
    times = np.cumsum(np.frombuffer(body, dtype="<u8"), dtype=np.uint64)
    try:
        return TimestampStream(channel, times, duration, None if seed == NO_SEED else seed)
    except ValueError as exc:
        raise FormatError(str(exc), path, field="times") from None


def write_timestamps_csv(streams, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "time_ps"])
        for s in streams:
            for t in s.times_ps:
                w.writerow([s.channel_id, int(t)])


def read_timestamps_csv(path, duration_ps=None):
    """CSV fallback; returns ``{channel: TimestampStream}``."""
    path = Path(path)
    per = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["channel", "time_ps"]:
            raise FormatError("expected header 'channel,time_ps'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ch = int(row[0])
            except ValueError:
                raise FormatError(f"bad channel {row[0]!r}", path, lineno, "channel") from None
            try:
                t = int(row[1])
            except (ValueError, IndexError):
                raise FormatError("bad time stamp", path, lineno, "time_ps") from None
            if t < 0:
                raise FormatError("negative time stamp", path, lineno, "time_ps")
            per.setdefault(ch, []).append(t)
    out = {}
    for ch, ts in per.items():
        ts = np.sort(np.array(ts, dtype=np.uint64))
        dur = duration_ps if duration_ps is not None else int(ts[-1]) + 1
        out[ch] = TimestampStream(ch, ts, dur)
    return out


def load_stream(path) -> TimestampStream:
    """Read a ``.qts`` file, or the first channel of a CSV file."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        streams = read_timestamps_csv(path)
        if not streams:
            raise FormatError("no time stamps", path)
        return streams[min(streams)]
    return read_qts(path)


def write_histogram_csv(h: CorrelationHistogram, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delay_ps", "counts"])
        for d, c in zip(h.delays_ps, h.counts):
            w.writerow([repr(float(d)), int(c)])


def read_histogram_csv(path) -> CorrelationHistogram:
    path = Path(path)
    d, c = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [x.strip() for x in next(reader, [])]
        if header[:2] != ["delay_ps", "counts"]:
            raise FormatError("expected header 'delay_ps,counts'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                d.append(float(row[0]))
                c.append(int(row[1]))
            except (ValueError, IndexError):
                raise FormatError("bad row", path, lineno) from None
    d = np.array(d)
    if len(d) < 2:
        raise FormatError("histogram needs at least two bins", path)
    bw = d[1] - d[0]
    if not np.allclose(np.diff(d), bw):
        raise FormatError("bins must be uniform", path, field="delay_ps")
    return CorrelationHistogram(int(round(bw)), d, np.array(c, dtype=np.int64))
