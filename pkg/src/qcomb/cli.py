"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 fit failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, counts, franson, pipeline, spectra, timestamps
from .config import load_config, phase_grid
from .errors import DataError, FitError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="TOML experiment config")
    g.add_argument("--seed", type=_u64, metavar="U64", default=argparse.SUPPRESS, help="override the config seed")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--format", choices=("json", "csv"), default=argparse.SUPPRESS, help="stdout format")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="qcomb", description="Microring photon-pair source toolkit", parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    groups = parser.add_subparsers(dest="group", metavar="COMMAND", parser_class=_Parser)
    groups.required = True

    def sub(group, name, help_):
        p = group.add_parser(name, help=help_, parents=[common])
        return p

    g = groups.add_parser("spectrum", help="transmission spectra").add_subparsers(dest="action", metavar="ACTION")
    g.required = True
    p = sub(g, "simulate", "write a synthetic resonance comb")
    p.add_argument("--modes", type=int, default=23)
    p.add_argument("--step-pm", type=float, default=0.5)
    p.set_defaults(func=cmd_spectrum_simulate)
    p = sub(g, "analyze", "find and fit resonances")
    p.add_argument("spectrum")
    p.add_argument("--min-depth-dB", type=float, default=3.0)
    p.add_argument("--coupling", choices=spectra.COUPLING_REGIMES)
    p.add_argument("--pump-nm", type=float)
    p.set_defaults(func=cmd_spectrum_analyze)

    g = groups.add_parser("dispersion", help="dispersion").add_subparsers(dest="action", metavar="ACTION")
    g.required = True
    p = sub(g, "fit", "fit D1 and D2 to resonance centres")
    p.add_argument("spectrum")
    p.add_argument("--min-depth-dB", type=float, default=3.0)
    p.add_argument("--coupling", choices=spectra.COUPLING_REGIMES)
    p.add_argument("--pump-nm", type=float)
    p.set_defaults(func=cmd_dispersion_fit)

    g = groups.add_parser("pairs", help="pump-power sweeps").add_subparsers(dest="action", metavar="ACTION")
    g.required = True
    p = sub(g, "simulate", "simulate power sweeps")
    p.add_argument("--channel", action="append")
    p.set_defaults(func=cmd_pairs_simulate)
    p = sub(g, "analyze", "extract R_PG from a sweep")
    p.add_argument("sweep")
    p.add_argument("--window-ns", type=float)
    p.add_argument("--bandwidth-pm", type=float)
    p.set_defaults(func=cmd_pairs_analyze)

    g = groups.add_parser("coincidence", help="time-tag streams").add_subparsers(dest="action", metavar="ACTION")
    g.required = True
    p = sub(g, "count", "count coincidences between two streams")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--window-ns", type=float, required=True)
    p.add_argument("--center-ns", type=float, default=0.0)
    p.add_argument("--histogram", metavar="CSV", help="also write a delay histogram")
    p.add_argument("--bin-ps", type=int, default=10)
    p.add_argument("--span-ps", type=int, default=2010)
    p.set_defaults(func=cmd_coincidence_count)

    g = groups.add_parser("franson", help="two-photon interference").add_subparsers(dest="action", metavar="ACTION")
    g.required = True
    p = sub(g, "simulate", "simulate fringe scans")
    p.add_argument("--channel", action="append")
    p.add_argument("--method", choices=("counts", "streams"))
    p.set_defaults(func=cmd_franson_simulate)
    p = sub(g, "analyze", "visibility and CHSH from a fringe scan")
    p.add_argument("scan")
    p.add_argument("--phase-unit", choices=("rad", "voltage"), default="rad")
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_franson_analyze)

    p = groups.add_parser("report", help="simulate and analyse every channel", parents=[common])
    p.add_argument("--analyze", metavar="DIR", help="analyse existing data files instead of simulating")
    p.add_argument("--timestamps", action="store_true", help="also write .qts time-tag files")
    p.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------- helpers


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _config(args):
    return load_config(_opt(args, "config"))


def _seed(args, config):
    s = _opt(args, "seed")
    return config.seed if s is None else s


def _out_dir(args):
    out = _opt(args, "out")
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _clean(obj):
    return pipeline._clean(obj)


def _emit(data, fmt, stream):
    """Print ``data`` (a dict or a list of flat dicts) as JSON or CSV."""
    if fmt == "csv":
        rows = data if isinstance(data, list) else [data]
        buf = io.StringIO()
        keys = list(rows[0].keys()) if rows else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys])
        stream.write(buf.getvalue())
    else:
        stream.write(json.dumps(_clean(data), sort_keys=True, indent=2, allow_nan=False) + "\n")


def _channels(config, names):
    if not names:
        return list(range(len(config.channels)))
    idx = []
    for n in names:
        try:
            idx.append(config.channel_names.index(n))
        except ValueError:
            raise UsageError(f"unknown channel {n!r}; choose from {', '.join(config.channel_names)}") from None
    return idx


# ---------------------------------------------------------------- commands


def cmd_spectrum_simulate(args, out):
    config = _config(args)
    ring = config.ring
    half = args.modes // 2
    mu = np.arange(-half, args.modes - half)
    centers = spectra.comb_wavelengths(ring.resonance_wavelength_nm, ring.fsr_Hz, ring.D2_over_2pi_Hz, mu)
    lo, hi = centers.min() - 1.0, centers.max() + 1.0
    grid = np.arange(round(lo * 1e3), round(hi * 1e3), args.step_pm) * 1e-3
    q_i = float(config.raw["ring"].get("q_intrinsic", 2 * ring.Q_external))
    t_min = spectra.min_transmission(q_i, ring.Q_external)
    spec = spectra.generate_spectrum(grid, centers, ring.Q_loaded, t_min)
    dest = (_out_dir(args) or Path(".")) / "spectrum.csv"
    spectra.write_spectrum_csv(spec, dest)
    return {"path": str(dest), "modes": int(len(mu)), "points": int(len(grid))}


def _resonances(args):
    spec = spectra.read_spectrum_csv(args.spectrum)
    return spectra.analyze_spectrum(spec, args.min_depth_dB, args.coupling, args.pump_nm)


def cmd_spectrum_analyze(args, out):
    res = _resonances(args)
    rows = [r.as_dict() for r in res]
    d = _out_dir(args)
    if d is not None:
        spectra.write_resonances_csv(res, d / "resonances.csv")
        (d / "resonances.json").write_text(spectra.resonances_to_json(res))
    return rows


def cmd_dispersion_fit(args, out):
    config = _config(args)
    if args.pump_nm is None:
        args.pump_nm = config.ring.resonance_wavelength_nm
    res = _resonances(args)
    pump = int(np.argmin([abs(r.lambda0_nm - args.pump_nm) for r in res]))
    fit = spectra.fit_dispersion(res, pump)
    d = fit.as_dict()
    d["n_group"] = config.ring.n_group
    d["beta2_s2_per_m"] = spectra.gvd_from_D2(fit.D2, fit.D1, config.ring.n_group)
    d["n_resonances"] = len(res)
    if _opt(args, "format") == "csv":
        return {k: v for k, v in d.items() if not isinstance(v, list)}
    return d


def cmd_pairs_simulate(args, out):
    config = _config(args)
    seed = _seed(args, config)
    d = _out_dir(args) or Path(".")
    c = config.counts
    rows = []
    for k in _channels(config, args.channel):
        spec = config.channels[k]
        rng = np.random.SeedSequence([seed, k, 1])
        sweep = counts.simulate_power_sweep(spec.pair, config.detectors, spec.R_PG_Hz_per_mW2,
                                            config.pump.power_sweep_mW, c.sweep_duration_s,
                                            c.cc_window_ns * 1e-9, rng)
        path = d / pipeline.channel_files(spec.name)["sweep"]
        counts.write_power_sweep_csv(sweep, path)
        rows.append({"channel": spec.name, "path": str(path)})
    return rows


def cmd_pairs_analyze(args, out):
    config = _config(args)
    window = args.window_ns if args.window_ns is not None else config.counts.cc_window_ns
    bw = args.bandwidth_pm if args.bandwidth_pm is not None else config.counts.bandwidth_pm
    sweep = counts.read_power_sweep_csv(args.sweep, window)
    est = counts.extract_R_PG(sweep, config.detectors)
    return {
        "R_s_Hz_per_mW2": est.R_s, "R_s_err_Hz_per_mW2": est.R_s_err,
        "R_i_Hz_per_mW2": est.R_i, "R_i_err_Hz_per_mW2": est.R_i_err,
        "R_CC_Hz_per_mW2": est.R_CC, "R_CC_err_Hz_per_mW2": est.R_CC_err,
        "R_PG_MHz_per_mW2": est.R_PG * 1e-6, "R_PG_err_MHz_per_mW2": est.R_PG_err * 1e-6,
        "eta_signal": est.eta_signal, "eta_idler": est.eta_idler,
        "brightness_GHz_per_mW2_per_nm": counts.brightness(est.R_PG, bw),
        "bandwidth_pm": bw,
    }


def cmd_coincidence_count(args, out):
    a = timestamps.load_stream(args.a)
    b = timestamps.load_stream(args.b)
    window = int(round(args.window_ns * 1e3))
    center = int(round(args.center_ns * 1e3))
    r = timestamps.count_coincidences(a, b, window, center)
    if args.histogram:
        h = timestamps.build_histogram(a, b, args.bin_ps, args.span_ps)
        timestamps.write_histogram_csv(h, args.histogram)
    return {"CC_counts": r.CC, "ACC_counts": r.ACC, "CAR": r.CAR, "window_ps": window,
            "center_delay_ps": center, "n_a": len(a), "n_b": len(b)}


def cmd_franson_simulate(args, out):
    config = _config(args)
    seed = _seed(args, config)
    d = _out_dir(args) or Path(".")
    f = config.franson
    method = args.method or f.method
    rows = []
    for k in _channels(config, args.channel):
        spec = config.channels[k]
        cfg = franson.FransonConfig(f.interferometer.path_imbalance_ns, 0.0, f.interferometer.splitter_ratio,
                                    spec.visibility)
        phases = phase_grid(f.n_phases)
        point_seed = int(np.random.SeedSequence([seed, k, 3]).generate_state(1, np.uint64)[0])
        if method == "streams":
            scan = franson.simulate_franson_scan(cfg, spec.pair, config.detectors, phases, f.duration_per_point_s,
                                                 spec.R_PG_Hz_per_mW2, f.power_mW, spec.tau_c_ps,
                                                 int(round(f.window_ns * 1e3)), point_seed)
        else:
            scan = franson.simulate_franson_scan_counts(cfg, spec.pair, config.detectors, phases,
                                                        f.duration_per_point_s, spec.R_PG_Hz_per_mW2,
                                                        f.power_mW, f.window_ns * 1e-9, point_seed)
        path = d / pipeline.channel_files(spec.name)["franson"]
        franson.write_scan_csv(scan, path)
        rows.append({"channel": spec.name, "path": str(path)})
    return rows


def cmd_franson_analyze(args, out):
    name = args.name or Path(args.scan).stem
    return {"channel": name, **pipeline.analyze_scan(args.scan, name, args.phase_unit)}


def cmd_report(args, out):
    config = _config(args)
    if args.analyze:
        report = pipeline.run_analysis(args.analyze, config)
    else:
        d = _out_dir(args)
        if d is None:
            with tempfile.TemporaryDirectory() as tmp:
                report = pipeline.run_forward(config, tmp, _seed(args, config), args.timestamps)
        else:
            report = pipeline.run_forward(config, d, _seed(args, config), args.timestamps)
    if _opt(args, "format") == "csv":
        out.write(report.to_csv())
    else:
        out.write(report.to_json())
    return None


# ---------------------------------------------------------------- entry point


def cli(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        with contextlib.redirect_stderr(stderr), contextlib.redirect_stdout(stdout):
            args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        result = args.func(args, stdout)
        if result is not None:
            _emit(result, _opt(args, "format", "json"), stdout)
        return EXIT_OK
    except UsageError as exc:
        print(f"qcomb: error: {exc}", file=stderr)
        return EXIT_USAGE
    except FitError as exc:
        print(f"qcomb: fit failed: {exc}", file=stderr)
        return EXIT_FIT
    except (DataError, ValueError, OSError) as exc:
        print(f"qcomb: data error: {exc}", file=stderr)
        return EXIT_DATA


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
