import io
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from qcomb import counts, timestamps
from qcomb.cli import cli
from qcomb.config import load_config

R_PG = 65.1e6

# the shortened configs leave a few channels with sparse histograms
pytestmark = pytest.mark.filterwarnings("ignore::qcomb.errors.JitterDominates")


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def quick_toml(tmp_path):
    """The shipped config with short integration times."""
    from importlib import resources

    text = resources.files("qcomb").joinpath("data/default.toml").read_text()
    text = text.replace("duration_s = 20.0", "duration_s = 2.0")
    text = text.replace("duration_per_point_s = 600.0", "duration_per_point_s = 60.0")
    text = text.replace("sweep_duration_s = 60.0", "sweep_duration_s = 10.0")
    path = tmp_path / "quick.toml"
    path.write_text(text)
    load_config(path)
    return path


def test_report_is_byte_identical(quick_toml, tmp_path):
    code1, out1, _ = run("report", "--config", str(quick_toml), "--seed", "7", "--out", str(tmp_path / "a"))
    code2, out2, _ = run("report", "--config", str(quick_toml), "--seed", "7", "--out", str(tmp_path / "b"))
    assert code1 == code2 == 0
    assert out1 == out2
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads(out1)["seed"] == 7


def test_report_analyze_matches_forward(quick_toml, tmp_path):
    _, forward, _ = run("report", "--config", str(quick_toml), "--out", str(tmp_path))
    code, analysed, _ = run("report", "--config", str(quick_toml), "--analyze", str(tmp_path))
    assert code == 0 and analysed == forward


def test_report_csv(quick_toml):
    code, out, _ = run("report", "--config", str(quick_toml), "--format", "csv")
    assert code == 0
    assert out.splitlines()[0].startswith("channel,")
    assert len(out.splitlines()) == 12


def test_coincidence_count_matches_brute_force(tmp_path, det, pair):
    s, i = timestamps.simulate_pair_streams(pair, det, R_PG, 0.5, 60.0, 0.2, 3)
    timestamps.write_qts(s, tmp_path / "a.qts")
    timestamps.write_qts(i, tmp_path / "b.qts")
    code, out, _ = run("coincidence", "count", str(tmp_path / "a.qts"), str(tmp_path / "b.qts"),
                       "--window-ns", "0.5", "--histogram", str(tmp_path / "h.csv"))
    assert code == 0
    data = json.loads(out)
    assert data["CC_counts"] == timestamps.brute_force_coincidences(s, i, 500)
    assert data["n_a"] == len(s)
    assert timestamps.read_histogram_csv(tmp_path / "h.csv").total > 0


def test_coincidence_count_csv_streams(tmp_path):
    a = timestamps.TimestampStream(0, np.array([100, 5000, 9000], np.uint64), 10**4)
    b = timestamps.TimestampStream(1, np.array([300, 5100, 9900], np.uint64), 10**4)
    timestamps.write_timestamps_csv([a], tmp_path / "a.csv")
    timestamps.write_timestamps_csv([b], tmp_path / "b.csv")
    code, out, _ = run("coincidence", "count", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                       "--window-ns", "0.4")
    assert code == 0 and json.loads(out)["CC_counts"] == 2


def test_spectrum_and_dispersion(tmp_path):
    code, _, _ = run("spectrum", "simulate", "--out", str(tmp_path))
    assert code == 0
    spec = str(tmp_path / "spectrum.csv")
    code, out, _ = run("dispersion", "fit", spec, "--coupling", "over")
    assert code == 0
    fit = json.loads(out)
    assert fit["D2_over_2pi_MHz"] == pytest.approx(32.4, rel=1e-3)
    assert fit["D1_over_2pi_GHz"] == pytest.approx(202.8, rel=1e-3)
    code, out, _ = run("spectrum", "analyze", spec, "--coupling", "over", "--out", str(tmp_path))
    assert code == 0 and len(json.loads(out)) == 23
    assert (tmp_path / "resonances.csv").exists()


def test_pairs_and_franson_commands(tmp_path, quick_toml):
    code, out, _ = run("pairs", "simulate", "--config", str(quick_toml), "--channel", "ch02", "--out", str(tmp_path))
    assert code == 0
    code, out, _ = run("pairs", "analyze", str(tmp_path / "ch02_sweep.csv"))
    assert code == 0
    assert json.loads(out)["R_PG_MHz_per_mW2"] == pytest.approx(65.1, rel=0.1)
    code, _, _ = run("franson", "simulate", "--config", str(quick_toml), "--channel", "ch02", "--out", str(tmp_path))
    assert code == 0
    code, out, _ = run("franson", "analyze", str(tmp_path / "ch02_franson.csv"))
    data = json.loads(out)
    assert code == 0 and data["channel"] == "ch02_franson"
    assert data["S_max"] == pytest.approx(2 * np.sqrt(2) * data["V_net"], rel=1e-12)


def test_usage_errors():
    code, out, err = run("frobnicate")
    assert code == 1 and "usage:" in err and out == ""
    code, _, err = run("report", "--no-such-flag")
    assert code == 1 and "usage:" in err
    code, _, err = run("coincidence", "count", "a", "b")
    assert code == 1 and "--window-ns" in err
    code, _, _ = run("report", "--seed", "-1")
    assert code == 1
    code, _, err = run("pairs", "simulate", "--channel", "ch99")
    assert code == 1 and "unknown channel" in err


def test_data_errors(tmp_path):
    code, _, err = run("coincidence", "count", str(tmp_path / "nope.qts"), str(tmp_path / "nope.qts"),
                       "--window-ns", "1")
    assert code == 2 and err
    (tmp_path / "bad.qts").write_bytes(b"NOPE" + bytes(26))
    code, _, err = run("coincidence", "count", str(tmp_path / "bad.qts"), str(tmp_path / "bad.qts"),
                       "--window-ns", "1")
    assert code == 2 and "magic" in err
    (tmp_path / "bad.toml").write_text("[ring\n")
    code, _, _ = run("report", "--config", str(tmp_path / "bad.toml"))
    assert code == 2


def test_ambiguous_coupling_is_a_data_error(tmp_path):
    run("spectrum", "simulate", "--out", str(tmp_path), "--modes", "5")
    code, _, err = run("dispersion", "fit", str(tmp_path / "spectrum.csv"))
    assert code == 2 and "coupling" in err


def test_fit_failure_exit_code(tmp_path, det, pair):
    sweep = counts.noiseless_power_sweep(pair, det, R_PG, [0.02, 0.04, 0.06, 0.08, 0.1], 60.0, 2.5e-9)
    # coincidences that fall with power: the quadratic term comes out negative
    sweep.cc_counts = 1e4 * (1 - 20 * sweep.powers_mW**2)
    counts.write_power_sweep_csv(sweep, tmp_path / "s.csv")
    code, _, err = run("pairs", "analyze", str(tmp_path / "s.csv"))
    assert code == 3 and "quadratic" in err


@pytest.mark.skipif(shutil.which("qcomb") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["qcomb", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("qcomb ")
    proc = subprocess.run([sys.executable, "-m", "qcomb", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
