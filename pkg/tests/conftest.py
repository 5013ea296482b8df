import csv
from pathlib import Path

import numpy as np
import pytest

from qcomb.config import default_config
from qcomb.counts import ChannelPair, DetectorModel

FIXTURES = Path(__file__).parent / "fixtures"


def read_fixture(name):
    with (FIXTURES / name).open(newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def default_cfg():
    return default_config()


@pytest.fixture
def det():
    return DetectorModel()


@pytest.fixture
def pair():
    eta = 10 ** (-2.43)
    return ChannelPair("c", 1542.94, 1549.32, eta, eta, 4.35e4, 4.35e4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def quick_config(default_cfg):
    """Default config shrunk so a full forward run takes about a second."""
    return default_cfg.with_overrides(**{
        "histogram.duration_s": 2.0,
        "franson.duration_per_point_s": 60.0,
        "counts.sweep_duration_s": 10.0,
    })


# acceptance verdicts, printed after the run: (criterion id, passed, detail)
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {detail}")
