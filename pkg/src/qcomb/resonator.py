"""Forward model of the ring: SFWM pair-generation rate, nonlinearity
extraction, Q/R scaling and the pulley-coupler efficiency."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import units


@dataclass(frozen=True)
class RingResonator:
    """Geometry and spectral parameters of the ring.

    ``n_group`` is usually derived from the measured FSR and the geometric
    round-trip length (see :meth:`from_fsr`), which makes the group velocity
    a spectrum-derived quantity.
    """

    radius_um: float
    n_group: float
    resonance_wavelength_nm: float
    Q_loaded: float
    Q_external: float
    gamma_per_W_m: float | None = None
    D2_over_2pi_Hz: float = 0.0

    def __post_init__(self):
        for name in ("radius_um", "n_group", "resonance_wavelength_nm", "Q_loaded", "Q_external"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma_per_W_m is not None and not self.gamma_per_W_m > 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def from_fsr(cls, radius_um, fsr_GHz, resonance_wavelength_nm, Q_loaded, Q_external,
                 gamma_per_W_m=None, D2_over_2pi_Hz=0.0):
        L = 2 * math.pi * radius_um * 1e-6
        n_group = units.C / (fsr_GHz * 1e9 * L)
        return cls(radius_um, n_group, resonance_wavelength_nm, Q_loaded, Q_external,
                   gamma_per_W_m, D2_over_2pi_Hz)

    @classmethod
    def from_mapping(cls, cfg):
        """Build from unit-suffixed keys (``radius_um``, ``fsr_GHz`` or ``n_group``, ...)."""
        common = dict(
            radius_um=float(cfg["radius_um"]),
            resonance_wavelength_nm=float(cfg["resonance_wavelength_nm"]),
            Q_loaded=float(cfg["q_loaded"]),
            Q_external=float(cfg["q_external"]),
            gamma_per_W_m=float(cfg["gamma_per_W_m"]) if cfg.get("gamma_per_W_m") is not None else None,
            D2_over_2pi_Hz=float(cfg.get("d2_over_2pi_MHz", 0.0)) * 1e6,
        )
        if "n_group" in cfg:
            return cls(n_group=float(cfg["n_group"]), **common)
        return cls.from_fsr(fsr_GHz=float(cfg["fsr_GHz"]), **common)

    @property
    def roundtrip_length_m(self):
        return 2 * math.pi * self.radius_um * 1e-6

    @property
    def group_velocity(self):
        return units.C / self.n_group

    @property
    def fsr_Hz(self):
        return self.group_velocity / self.roundtrip_length_m

    @property
    def D1(self):
        return 2 * math.pi * self.fsr_Hz

    @property
    def D2(self):
        return 2 * math.pi * self.D2_over_2pi_Hz

    @property
    def omega0(self):
        return units.wavelength_to_angular_frequency(self.resonance_wavelength_nm)

    def with_gamma(self, gamma):
        return replace(self, gamma_per_W_m=gamma)


def sinc2(x):
    """(sin x / x)^2 with the removable singularity filled in."""
    x = np.asarray(x, dtype=float)
    out = np.sinc(x / math.pi) ** 2
    return out if out.ndim else float(out)


def _rate_prefactor(ring: RingResonator):
    # everything in N except gamma^2 P^2 sinc^2
    Q, Qe = ring.Q_loaded, ring.Q_external
    L = ring.roundtrip_length_m
    # ratios grouped to stay well inside double range
    return 32.0 * ring.group_velocity**4 * Q**3 * (Q / Qe) ** 5 / (ring.omega0**3 * L**2)


def pair_generation_rate(ring: RingResonator, pump_power_W, delta_kappa_per_m=0.0):
    """On-chip SFWM pair rate in Hz.

    ``N = 32 gamma^2 v_g^4 P^2 Q^8 / (omega0^3 L^2 Qe^5) * sinc^2(L dk / 2)``
    with Q the loaded and Qe the external quality factor.
    """
    if ring.gamma_per_W_m is None:
        raise ValueError("ring has no nonlinear coefficient; use extract_gamma first")
    P = np.asarray(pump_power_W, dtype=float)
    if np.any(P < 0):
        raise ValueError("pump power must be non-negative")
    phase = 0.5 * ring.roundtrip_length_m * np.asarray(delta_kappa_per_m, dtype=float)
    out = _rate_prefactor(ring) * ring.gamma_per_W_m**2 * P**2 * sinc2(phase)
    return out if np.ndim(out) else float(out)


def extract_gamma(ring: RingResonator, measured_R_PG_Hz_per_W2):
    """Invert the pair-rate formula for gamma at perfect phase matching.

    ``measured_R_PG_Hz_per_W2`` is the on-chip rate per squared pump power in
    Hz/W^2 (1 MHz/mW^2 = 1e12 Hz/W^2).
    """
    if not measured_R_PG_Hz_per_W2 > 0:
        raise ValueError("R_PG must be positive")
    return math.sqrt(measured_R_PG_Hz_per_W2 / _rate_prefactor(ring))


def rate_scaling(ring: RingResonator, factor_Q, factor_R):
    """Ratio of pair rates after scaling Q (with Qe/Q fixed) and radius.

    Evaluated numerically through :func:`pair_generation_rate` on the scaled
    ring, at fixed group index and pump power; the closed form is
    ``factor_Q**3 / factor_R**2``.
    """
    if ring.gamma_per_W_m is None:
        ring = ring.with_gamma(1.0)
    scaled = replace(
        ring,
        Q_loaded=ring.Q_loaded * factor_Q,
        Q_external=ring.Q_external * factor_Q,
        radius_um=ring.radius_um * factor_R,
    )
    return pair_generation_rate(scaled, 1e-3) / pair_generation_rate(ring, 1e-3)


@dataclass(frozen=True)
class CouplerDesign:
    """Pulley coupler: even/odd supermode index split, wavelength, coupling length."""

    delta_n_eff: float
    wavelength_nm: float
    coupling_length_um: float

    def __post_init__(self):
        if self.delta_n_eff < 0:
            raise ValueError("delta_n_eff must be >= 0")
        if self.wavelength_nm <= 0 or self.coupling_length_um < 0:
            raise ValueError("wavelength must be positive and coupling length non-negative")


def coupling_coefficient(design: CouplerDesign):
    """C = pi * delta_n_eff / lambda, in 1/m."""
    return math.pi * design.delta_n_eff / (design.wavelength_nm * 1e-9)


def coupling_efficiency(design: CouplerDesign):
    """Fraction of bus power transferred into the ring, sin^2(C L_c)."""
    return math.sin(coupling_coefficient(design) * design.coupling_length_um * 1e-6) ** 2


def full_transfer_length_um(design: CouplerDesign):
    C = coupling_coefficient(design)
    if C == 0:
        return math.inf
    return math.pi / (2 * C) * 1e6
