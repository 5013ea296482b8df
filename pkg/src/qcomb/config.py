"""Experiment configuration: TOML with unit-suffixed keys."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import units
from .counts import ChannelPair, DetectorModel, LossChain
from .errors import FormatError
from .franson import FransonConfig
from .resonator import RingResonator

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ChannelSpec:
    """A channel pair plus the ground truth injected when simulating it."""

    pair: ChannelPair
    tau_c_ps: float
    R_PG_Hz_per_mW2: float
    visibility: float

    @property
    def name(self):
        return self.pair.name


@dataclass(frozen=True)
class PumpSettings:
    wavelength_nm: float
    power_sweep_mW: tuple
    car_power_mW: float


@dataclass(frozen=True)
class CountSettings:
    bandwidth_pm: float = 15.0
    cc_window_ns: float = 2.5
    car_window_ns: float = 0.5
    sweep_duration_s: float = 60.0
    channel_grid_GHz: float = 200.0
    grid_tolerance_GHz: float = 1.0


@dataclass(frozen=True)
class HistogramSettings:
    power_mW: float = 0.5
    duration_s: float = 20.0
    bin_width_ps: int = 10
    span_ps: int = 2010


@dataclass(frozen=True)
class FransonSettings:
    interferometer: FransonConfig
    power_mW: float = 0.18
    window_ns: float = 0.5
    n_phases: int = 13
    duration_per_point_s: float = 600.0
    method: str = "counts"

    def __post_init__(self):
        if self.method not in ("counts", "streams"):
            raise ValueError("franson.method must be 'counts' or 'streams'")
        if self.n_phases < 4:
            raise ValueError("franson.n_phases must be >= 4")


@dataclass(frozen=True)
class ExperimentConfig:
    ring: RingResonator
    channels: tuple
    detectors: tuple  # (signal, idler)
    losses: dict  # arm name -> LossChain
    pump: PumpSettings
    counts: CountSettings
    histogram: HistogramSettings
    franson: FransonSettings
    seed: int
    gamma_reference_channel: str | None = None
    raw: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        check_channel_grid(self)
        if self.gamma_reference_channel is not None:
            self.channel(self.gamma_reference_channel)

    @property
    def channel_names(self):
        return [c.name for c in self.channels]

    def channel(self, name):
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(f"no channel named {name!r}")

    def with_overrides(self, **changes):
        """Copy of the raw mapping with dotted-key overrides, rebuilt and validated."""
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return from_mapping(raw)


def check_channel_grid(cfg: ExperimentConfig):
    """Each photon frequency must sit on the channel grid around the pump."""
    nu_p = units.wavelength_to_frequency(cfg.pump.wavelength_nm)
    grid = cfg.counts.channel_grid_GHz * 1e9
    tol = cfg.counts.grid_tolerance_GHz * 1e9
    for c in cfg.channels:
        for lam in (c.pair.lambda_signal_nm, c.pair.lambda_idler_nm):
            off = units.wavelength_to_frequency(lam) - nu_p
            k = round(off / grid)
            if k == 0 or abs(off - k * grid) > tol:
                raise ValueError(f"{c.name}: {lam} nm is {off / 1e9:.2f} GHz from the pump, "
                                 f"not on the {cfg.counts.channel_grid_GHz} GHz grid")
        ks = units.wavelength_to_frequency(c.pair.lambda_signal_nm) - nu_p
        ki = units.wavelength_to_frequency(c.pair.lambda_idler_nm) - nu_p
        if round(ks / grid) != -round(ki / grid):
            raise ValueError(f"{c.name}: signal and idler are not symmetric about the pump")


def _section(raw, name):
    try:
        return raw[name]
    except KeyError:
        raise FormatError(f"missing [{name}] section", field=name) from None


def _detector(d):
    return DetectorModel(float(d["efficiency"]), float(d["dark_rate_Hz"]), float(d["dead_time_s"]),
                         float(d.get("jitter_sigma_ps", 50.0)))


def from_mapping(raw) -> ExperimentConfig:
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {raw.get('schema_version')}", field="schema_version")
    try:
        ring = RingResonator.from_mapping(_section(raw, "ring"))
        dets = _section(raw, "detectors")
        detectors = (_detector(dets["signal"]), _detector(dets["idler"]))
        losses = {arm: LossChain.from_mapping(m) for arm, m in _section(raw, "losses").items()}
        cnt = dict(_section(raw, "counts"))
        raman_s = float(cnt.pop("raman_signal_Hz_per_mW", 0.0))
        raman_i = float(cnt.pop("raman_idler_Hz_per_mW", 0.0))
        counts = CountSettings(**{k: float(v) for k, v in cnt.items()})
        pump = _section(raw, "pump")
        pump = PumpSettings(float(pump["wavelength_nm"]), tuple(float(p) for p in pump["power_sweep_mW"]),
                            float(pump["car_power_mW"]))
        hist = _section(raw, "histogram")
        histogram = HistogramSettings(float(hist["power_mW"]), float(hist["duration_s"]),
                                      int(hist["bin_width_ps"]), int(hist["span_ps"]))
        fr = dict(_section(raw, "franson"))
        interferometer = FransonConfig(float(fr.pop("path_imbalance_ns")), 0.0, float(fr.pop("splitter_ratio")))
        franson = FransonSettings(interferometer, float(fr["power_mW"]), float(fr["window_ns"]),
                                  int(fr["n_phases"]), float(fr["duration_per_point_s"]), str(fr["method"]))
        eta_s = losses["signal"].transmittance
        eta_i = losses["idler"].transmittance
        channels = []
        for ch in _section(raw, "channels"):
            pair = ChannelPair(
                str(ch["name"]), float(ch["lambda_signal_nm"]), float(ch["lambda_idler_nm"]),
                float(ch.get("eta_signal", eta_s)), float(ch.get("eta_idler", eta_i)),
                float(ch.get("raman_signal_Hz_per_mW", raman_s)), float(ch.get("raman_idler_Hz_per_mW", raman_i)),
                float(ch.get("bandwidth_pm", counts.bandwidth_pm)),
            )
            channels.append(ChannelSpec(pair, float(ch["tau_c_ps"]), float(ch["R_PG_MHz_per_mW2"]) * 1e6,
                                        float(ch["visibility"])))
        seed = int(raw.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        ref = raw["ring"].get("gamma_reference_channel")
        return ExperimentConfig(ring, tuple(channels), detectors, losses, pump, counts, histogram, franson,
                                seed, ref, raw)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"invalid config: {exc!r}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid config: {exc}") from None


def load_config(path=None) -> ExperimentConfig:
    """Load a TOML config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("qcomb").joinpath("data/default.toml").read_text()
        src = "default.toml"
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config: {exc.strerror}", path) from None
        src = path
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"TOML syntax error: {exc}", src) from None
    return from_mapping(raw)


def default_config() -> ExperimentConfig:
    return load_config(None)


def phase_grid(n):
    return [2 * math.pi * k / n for k in range(n)]
