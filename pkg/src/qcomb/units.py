"""Physical constants and the handful of conversions the pipeline needs.

Canonical units: picoseconds for time stamps, nm for wavelengths at the I/O
boundary (rad/s internally), Hz for rates, mW for pump power at API boundaries
and W inside the pair-generation formula.
"""

from types import MappingProxyType

import numpy as np

C = 299_792_458.0  # m/s
H = 6.626_070_15e-34  # J s
PI = np.pi

CONSTANTS = MappingProxyType({"c": C, "h": H, "pi": PI})


def wavelength_to_angular_frequency(lambda_nm):
    """omega = 2 pi c / lambda, lambda in nm, result in rad/s."""
    lam = np.asarray(lambda_nm, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    out = 2.0 * PI * C / (lam * 1e-9)
    return out if out.ndim else float(out)


def angular_frequency_to_wavelength(omega):
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0):
        raise ValueError("angular frequency must be positive")
    out = 2.0 * PI * C / w * 1e9
    return out if out.ndim else float(out)


def wavelength_to_frequency(lambda_nm):
    """Optical frequency in Hz."""
    lam = np.asarray(lambda_nm, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    out = C / (lam * 1e-9)
    return out if out.ndim else float(out)


def frequency_to_wavelength(nu_Hz):
    nu = np.asarray(nu_Hz, dtype=float)
    if np.any(nu <= 0):
        raise ValueError("frequency must be positive")
    out = C / nu * 1e9
    return out if out.ndim else float(out)


def db_to_linear(loss_dB):
    """Loss in dB (positive = attenuation) to transmitted fraction."""
    out = np.power(10.0, -np.asarray(loss_dB, dtype=float) / 10.0)
    return out if out.ndim else float(out)


def linear_to_db(fraction):
    """Transmitted fraction to loss in dB; inverse of :func:`db_to_linear`."""
    f = np.asarray(fraction, dtype=float)
    if np.any(f <= 0):
        raise ValueError("fraction must be positive")
    out = -10.0 * np.log10(f)
    return out if out.ndim else float(out)


def photon_energy_J(lambda_nm):
    return H * wavelength_to_frequency(lambda_nm)


def mW_to_W(p_mW):
    return np.asarray(p_mW, dtype=float) * 1e-3 if np.ndim(p_mW) else float(p_mW) * 1e-3


def ns_to_ps(t_ns):
    return int(round(float(t_ns) * 1000.0))


def s_to_ps(t_s):
    return int(round(float(t_s) * 1e12))
