"""End-to-end orchestration: forward simulation of every channel pair,
analysis of the resulting data files, and the summary report.

``run_forward`` only writes data files; the numbers in its report come from
``run_analysis`` reading those files back, so the simulated and the
re-analysed reports agree exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import counts, franson, spectra, timestamps
from .config import ExperimentConfig, phase_grid
from .errors import DataError, EmptyStream, FitError, FormatError, QcombError
from .resonator import extract_gamma

REPORT_SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class ChannelRow:
    channel: str
    lambda_signal_nm: float
    lambda_idler_nm: float
    tau_c_ps: float | None = None
    tau_c_err_ps: float | None = None
    R_PG_MHz_per_mW2: float | None = None
    R_PG_err_MHz_per_mW2: float | None = None
    brightness_GHz_per_mW2_per_nm: float | None = None
    CAR: float | None = None
    CAR_power_mW: float | None = None
    V_raw: float | None = None
    V_raw_err: float | None = None
    V_net: float | None = None
    V_net_err: float | None = None
    S_max: float | None = None
    S_max_err: float | None = None
    n_sigma: float | None = None
    error: str | None = None


@dataclass
class ExperimentReport:
    rows: list
    aggregates: dict
    device: dict
    seed: int | None = None
    config_sha256: str | None = None
    schema_version: int = field(default=REPORT_SCHEMA_VERSION)

    def as_dict(self):
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
            "channels": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "device": self.device,
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.as_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(ChannelRow)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow(["" if getattr(r, n) is None else _fmt(getattr(r, n)) for n in names])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _clean(obj):
    # JSON-safe: numpy scalars to Python, non-finite floats to null
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def aggregates(rows):
    return {
        "mean_brightness_GHz_per_mW2_per_nm": _mean(r.brightness_GHz_per_mW2_per_nm for r in rows),
        "mean_V_net": _mean(r.V_net for r in rows),
        "mean_V_raw": _mean(r.V_raw for r in rows),
        "mean_tau_c_ps": _mean(r.tau_c_ps for r in rows),
        "n_channels_ok": sum(r.error is None for r in rows),
    }


def config_digest(config: ExperimentConfig):
    return hashlib.sha256(json.dumps(config.raw, sort_keys=True, default=repr).encode()).hexdigest()


# ---------------------------------------------------------------- file layout


def channel_files(name):
    return {
        "sweep": f"{name}_sweep.csv",
        "histogram": f"{name}_histogram.csv",
        "franson": f"{name}_franson.csv",
    }


def _channel_seeds(seed, index):
    ss = np.random.SeedSequence([int(seed), int(index)])
    return [int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(3)]


# ---------------------------------------------------------------- forward


def simulate_channel(config: ExperimentConfig, index, out_dir, seed, write_timestamps=False):
    """Write the sweep, histogram and fringe-scan files for one channel pair."""
    spec = config.channels[index]
    pair, dets = spec.pair, config.detectors
    s_sweep, s_streams, s_franson = _channel_seeds(seed, index)
    files = channel_files(spec.name)
    out_dir = Path(out_dir)

    h = config.histogram
    if h.duration_s <= 0:
        raise EmptyStream("zero-duration record")
    s, i = timestamps.simulate_pair_streams(pair, dets, spec.R_PG_Hz_per_mW2, h.power_mW, spec.tau_c_ps,
                                            h.duration_s, s_streams)
    if write_timestamps:
        timestamps.write_qts(s, out_dir / f"{spec.name}_signal.qts")
        timestamps.write_qts(i, out_dir / f"{spec.name}_idler.qts")
    hist = timestamps.build_histogram(s, i, h.bin_width_ps, h.span_ps)
    timestamps.write_histogram_csv(hist, out_dir / files["histogram"])

    c = config.counts
    sweep = counts.simulate_power_sweep(pair, dets, spec.R_PG_Hz_per_mW2, config.pump.power_sweep_mW,
                                        c.sweep_duration_s, c.cc_window_ns * 1e-9, s_sweep)
    counts.write_power_sweep_csv(sweep, out_dir / files["sweep"])

    f = config.franson
    cfg = franson.FransonConfig(f.interferometer.path_imbalance_ns, 0.0, f.interferometer.splitter_ratio,
                                spec.visibility)
    phases = phase_grid(f.n_phases)
    if f.method == "streams":
        scan = franson.simulate_franson_scan(cfg, pair, dets, phases, f.duration_per_point_s,
                                             spec.R_PG_Hz_per_mW2, f.power_mW, spec.tau_c_ps,
                                             int(round(f.window_ns * 1e3)), s_franson)
    else:
        scan = franson.simulate_franson_scan_counts(cfg, pair, dets, phases, f.duration_per_point_s,
                                                    spec.R_PG_Hz_per_mW2, f.power_mW, f.window_ns * 1e-9,
                                                    s_franson)
    franson.write_scan_csv(scan, out_dir / files["franson"])
    return files


def run_forward(config: ExperimentConfig, out_dir, seed=None, write_timestamps=False) -> ExperimentReport:
    """Simulate every channel, write the data files, then analyse them.

    Simulation failures are recorded per channel in the manifest and show up
    as that channel's ``error`` in the report.
    """
    seed = config.seed if seed is None else int(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, spec in enumerate(config.channels):
        entry = {"name": spec.name}
        try:
            entry["files"] = simulate_channel(config, k, out_dir, seed, write_timestamps)
        except (QcombError, ValueError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entries.append(entry)
    manifest = {"schema_version": REPORT_SCHEMA_VERSION, "seed": seed, "channels": entries}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    report = run_analysis(out_dir, config)
    write_report(report, out_dir)
    return report


def write_report(report: ExperimentReport, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.csv").write_text(report.to_csv())


# ---------------------------------------------------------------- analysis


def analyze_sweep(path, config: ExperimentConfig, bandwidth_pm):
    c = config.counts
    sweep = counts.read_power_sweep_csv(path, c.cc_window_ns)
    est = counts.extract_R_PG(sweep, config.detectors)
    j = int(np.argmin(np.abs(sweep.powers_mW - config.pump.car_power_mW)))
    sc_s, sc_i = sweep.singles_s_Hz[j], sweep.singles_i_Hz[j]
    net = sweep.cc_counts[j] / sweep.duration_s[j] - sc_s * sc_i * c.cc_window_ns * 1e-9
    acc_car = sc_s * sc_i * c.car_window_ns * 1e-9
    return {
        "R_PG_MHz_per_mW2": est.R_PG * 1e-6,
        "R_PG_err_MHz_per_mW2": est.R_PG_err * 1e-6,
        "brightness_GHz_per_mW2_per_nm": counts.brightness(est.R_PG, bandwidth_pm),
        "CAR": net / acc_car if acc_car > 0 else math.inf,
        "CAR_power_mW": float(sweep.powers_mW[j]),
    }


def analyze_histogram(path, config: ExperimentConfig):
    h = timestamps.read_histogram_csv(path)
    ds, di = config.detectors
    sigma = math.hypot(ds.jitter_sigma_ps, di.jitter_sigma_ps)
    fit = timestamps.fit_coherence_time(h, sigma)
    return {"tau_c_ps": fit.tau_c_ps, "tau_c_err_ps": fit.uncertainty_ps}


def analyze_scan(path, name, phase_unit="rad"):
    scan = franson.read_scan_csv(path)
    raw = franson.visibility_from_scan(scan, subtract_background=False, phase_unit=phase_unit)
    net = franson.visibility_from_scan(scan, subtract_background=True, phase_unit=phase_unit)
    rep = franson.EntanglementReport.from_visibilities(name, raw, net)
    d = rep.as_dict()
    del d["channel"]
    return d


def _manifest(data_dir, config):
    path = Path(data_dir) / MANIFEST
    if path.exists():
        try:
            m = json.loads(path.read_text())
            return {e["name"]: e for e in m["channels"]}, m.get("seed")
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad manifest: {exc}", path) from None
    return {c.name: {"name": c.name, "files": channel_files(c.name)} for c in config.channels}, None


def analyze_channel(data_dir, config: ExperimentConfig, spec, entry) -> ChannelRow:
    row = ChannelRow(spec.name, spec.pair.lambda_signal_nm, spec.pair.lambda_idler_nm)
    if entry.get("error"):
        row.error = entry["error"]
        return row
    files = entry.get("files") or channel_files(spec.name)
    d = Path(data_dir)
    try:
        for k, v in analyze_sweep(d / files["sweep"], config, spec.pair.bandwidth_pm).items():
            setattr(row, k, v)
        for k, v in analyze_histogram(d / files["histogram"], config).items():
            setattr(row, k, v)
        for k, v in analyze_scan(d / files["franson"], spec.name).items():
            setattr(row, k, v)
    except FormatError:
        raise
    except (DataError, FitError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        # e.g. a noisy net visibility above 1, which has no CHSH bound
        row.error = f"ValueError: {exc}"
    return row


def device_summary(config: ExperimentConfig, rows):
    ring = config.ring
    out = {
        "n_group": ring.n_group,
        "fsr_GHz": ring.fsr_Hz * 1e-9,
        "roundtrip_length_m": ring.roundtrip_length_m,
        "beta2_s2_per_m": spectra.gvd_from_D2(ring.D2, ring.D1, ring.n_group),
        "gamma_per_W_m": None,
        "gamma_reference_channel": config.gamma_reference_channel,
    }
    ref = next((r for r in rows if r.channel == config.gamma_reference_channel), None)
    if ref is not None and ref.R_PG_MHz_per_mW2 and ref.R_PG_MHz_per_mW2 > 0:
        out["gamma_per_W_m"] = extract_gamma(ring, ref.R_PG_MHz_per_mW2 * 1e12)
    return out


def run_analysis(data_dir, config: ExperimentConfig) -> ExperimentReport:
    """Rebuild the report from the data files in ``data_dir``.

    Malformed files raise FormatError; fit and data pathologies in one
    channel are recorded in that channel's row.
    """
    entries, seed = _manifest(data_dir, config)
    rows = []
    for spec in config.channels:
        entry = entries.get(spec.name)
        if entry is None:
            rows.append(ChannelRow(spec.name, spec.pair.lambda_signal_nm, spec.pair.lambda_idler_nm,
                                   error="missing from manifest"))
            continue
        rows.append(analyze_channel(data_dir, config, spec, entry))
    return ExperimentReport(rows, aggregates(rows), device_summary(config, rows), seed, config_digest(config))
