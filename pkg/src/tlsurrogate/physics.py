"""Closed-form acoustics: Thorp absorption, spreading, the physics mean and ship source level.

Frequencies are in kHz for absorption (dB/km) and in Hz for the source level.
All functions broadcast over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KNOT_MS = 0.514  # m/s per knot, as used for leg time budgets


@dataclass
class PhysicsMeanParams:
    A: float = 20.0  # spherical spreading
    B: float = 1.0


@dataclass(frozen=True)
class SourceSpec:
    """Vessel description for the JOMOPANS-ECHO source level."""

    vessel_length_m: float = 200.0
    V_C: float = 13.9
    K: float = 191.0
    D: float = 3.0
    l_0: float = 100.0

    def __post_init__(self):
        if not self.vessel_length_m > 0:
            raise ValueError("vessel_length_m must be positive")


def thorp_alpha(f_khz):
    """Thorp volume absorption in dB/km, ``f_khz`` in kHz."""
    f2 = np.asarray(f_khz, dtype=float) ** 2
    return 0.11 * f2 / (1.0 + f2) + 44.0 * f2 / (4100.0 + f2) + 2.75e-4 * f2 + 0.003


def spreading_db(R_m, A=20.0):
    return A * np.log10(R_m)


def physics_mean_tl(R_m, f_khz, params: PhysicsMeanParams | None = None):
    """``A log10(R) + B alpha(f) R`` with R in meters for the log and km for absorption."""
    p = params or PhysicsMeanParams()
    R_m = np.asarray(R_m, dtype=float)
    return p.A * np.log10(R_m) + p.B * thorp_alpha(f_khz) * (R_m / 1000.0)


def jomopans_echo_sl(f_hz, V_knots, L_m, spec: SourceSpec | None = None):
    """Near-field one-third-octave source level (dB re 1 uPa @ 1 m)."""
    s = spec or SourceSpec()
    f = np.asarray(f_hz, dtype=float)
    f_ref = 480.0 / s.V_C
    return (
        s.K
        - 20.0 * np.log10(f_ref)
        - 10.0 * np.log10((1.0 - f / f_ref) ** 2 + s.D ** 2)
        + 60.0 * np.log10(np.asarray(V_knots, dtype=float) / s.V_C)
        + 20.0 * np.log10(np.asarray(L_m, dtype=float) / s.l_0)
        + 10.0 * np.log10(0.231 * f)
    )
