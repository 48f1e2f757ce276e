"""Jones-vector polarization states and the optical elements of the receiver.

Angles are given in degrees at the API boundary and converted to radians
internally. All types are immutable; every function is pure and also accepts
numpy arrays where noted so the engine can route photons in bulk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9
INFINITE_RATIO = math.inf


@dataclass(frozen=True)
class JonesVector:
    amplitude_h: complex
    amplitude_v: complex

    @classmethod
    def linear(cls, angle_deg: float) -> "JonesVector":
        a = math.radians(angle_deg)
        return cls(complex(math.cos(a)), complex(math.sin(a)))

    @classmethod
    def circular(cls, handedness: int = 1) -> "JonesVector":
        s = 1 / math.sqrt(2)
        return cls(complex(s), 1j * s * handedness)

    @property
    def norm(self) -> float:
        return math.sqrt(abs(self.amplitude_h) ** 2 + abs(self.amplitude_v) ** 2)

    def normalized(self) -> "JonesVector":
        n = self.norm
        if n == 0:
            raise ValueError("cannot normalize a zero Jones vector")
        return JonesVector(self.amplitude_h / n, self.amplitude_v / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.amplitude_h, self.amplitude_v], dtype=complex)

    def major_axis_deg(self) -> float:
        """Orientation of the polarization ellipse's major axis, in [0, 180)."""
        s1 = abs(self.amplitude_h) ** 2 - abs(self.amplitude_v) ** 2
        s2 = 2 * (self.amplitude_h.conjugate() * self.amplitude_v).real
        return math.degrees(0.5 * math.atan2(s2, s1)) % 180.0

    def is_close(self, other: "JonesVector", tol: float = 1e-9) -> bool:
        """Equality up to a global phase."""
        overlap = abs(np.vdot(self.as_array(), other.as_array()))
        return abs(overlap - self.norm * other.norm) < tol


H = JonesVector.linear(0.0)
V = JonesVector.linear(90.0)
D = JonesVector.linear(45.0)
A = JonesVector.linear(135.0)

CHANNEL_ANGLES = {"H": 0.0, "V": 90.0, "D": 45.0, "A": 135.0}
BASIS_OF = {"H": "HV", "V": "HV", "D": "DA", "A": "DA"}
CONJUGATE = {"H": "V", "V": "H", "D": "A", "A": "D"}


def _check_ratio(extinction_ratio: float) -> None:
    if not extinction_ratio > 1 or math.isnan(extinction_ratio):
        raise ValueError(f"extinction_ratio must be > 1, got {extinction_ratio}")


@dataclass(frozen=True)
class PbsSpec:
    axis_angle: float = 0.0
    extinction_ratio: float = INFINITE_RATIO

    def __post_init__(self):
        _check_ratio(self.extinction_ratio)
        object.__setattr__(self, "axis_angle", float(self.axis_angle) % 360.0)

    def rotated(self, angle_deg: float) -> "PbsSpec":
        return PbsSpec(angle_deg, self.extinction_ratio)


@dataclass(frozen=True)
class WaveplateSpec:
    retardance: float = 0.0
    fast_axis_angle: float = 0.0


@dataclass(frozen=True)
class FilterSpec:
    center_wavelength: float = 808.0
    bandwidth_fwhm: float = 3.0
    peak_transmission: float = 1.0
    profile: str = "tophat"

    def __post_init__(self):
        if self.bandwidth_fwhm <= 0:
            raise ValueError("bandwidth_fwhm must be positive")
        if not 0 <= self.peak_transmission <= 1:
            raise ValueError("peak_transmission must lie in [0, 1]")
        if self.profile not in ("tophat", "gaussian"):
            raise ValueError(f"unknown filter profile {self.profile!r}")

    @property
    def support(self) -> tuple[float, float]:
        half = self.bandwidth_fwhm / 2 if self.profile == "tophat" else 3 * self.bandwidth_fwhm
        return self.center_wavelength - half, self.center_wavelength + half


def transmit_probability(amp_h, amp_v, axis_deg, extinction_ratio):
    """Vectorized finite-extinction PBS transmission probability.

    Mixes the aligned and orthogonal projections as
    (ER*|<a|psi>|^2 + |<a_perp|psi>|^2) / (ER + 1); for linear states this is
    (ER*cos^2 d + sin^2 d) / (ER + 1). Works for elliptical states too.
    """
    th = np.radians(axis_deg)
    c, s = np.cos(th), np.sin(th)
    along = np.abs(c * amp_h + s * amp_v) ** 2
    across = np.abs(-s * amp_h + c * amp_v) ** 2
    if np.isinf(extinction_ratio):
        return along / (along + across)
    return (extinction_ratio * along + across) / ((extinction_ratio + 1) * (along + across))


def pbs_project(state: JonesVector, pbs: PbsSpec) -> tuple[float, JonesVector, JonesVector]:
    """Probability of transmission through a PBS and the two output eigenstates."""
    if abs(state.norm - 1) > NORM_TOL:
        raise ValueError(f"state is not normalized (norm={state.norm})")
    _check_ratio(pbs.extinction_ratio)
    p = float(transmit_probability(state.amplitude_h, state.amplitude_v,
                                   pbs.axis_angle, pbs.extinction_ratio))
    return p, JonesVector.linear(pbs.axis_angle), JonesVector.linear(pbs.axis_angle + 90.0)


def waveplate_matrix(wp: WaveplateSpec) -> np.ndarray:
    th = math.radians(wp.fast_axis_angle)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    # symmetric phase convention keeps det = 1
    phase = np.diag([np.exp(-0.5j * wp.retardance), np.exp(0.5j * wp.retardance)])
    return rot @ phase @ rot.T


def apply_waveplate(amp_h, amp_v, wp: WaveplateSpec):
    """Vectorized form of `waveplate_apply` over amplitude arrays."""
    if wp.retardance == 0:
        return amp_h, amp_v
    m = waveplate_matrix(wp)
    return m[0, 0] * amp_h + m[0, 1] * amp_v, m[1, 0] * amp_h + m[1, 1] * amp_v


def waveplate_apply(state: JonesVector, wp: WaveplateSpec) -> JonesVector:
    if abs(state.norm - 1) > NORM_TOL:
        raise ValueError(f"state is not normalized (norm={state.norm})")
    h, v = waveplate_matrix(wp) @ state.as_array()
    return JonesVector(complex(h), complex(v))


def filter_transmission(wavelength, filt: FilterSpec | None):
    """Transmission of a spectral filter; scalar in, scalar out (arrays also work)."""
    if filt is None:
        return np.ones_like(wavelength, dtype=float) if np.ndim(wavelength) else 1.0
    lam = np.asarray(wavelength, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    lo, hi = filt.support
    inside = (lam >= lo) & (lam <= hi)
    if filt.profile == "tophat":
        out = np.where(inside, filt.peak_transmission, 0.0)
    else:
        g = np.exp(-4 * math.log(2) * (lam - filt.center_wavelength) ** 2 / filt.bandwidth_fwhm ** 2)
        out = np.where(inside, filt.peak_transmission * g, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ExtinctionScan:
    max_angle: float
    max_power: float
    min_angle: float
    min_power: float
    ratio: float


def extinction_ratio_from_scan(scan: Sequence[tuple[float, float]]) -> ExtinctionScan:
    """Max/min power ratio of a rotating-PBS scan. Ties go to the smallest angle."""
    if len(scan) == 0:
        raise ValueError("scan is empty")
    pts = sorted((float(a), float(p)) for a, p in scan)
    if any(p < 0 for _, p in pts):
        raise ValueError("powers must be non-negative")
    max_angle, max_power = pts[0]
    min_angle, min_power = pts[0]
    for a, p in pts[1:]:
        if p > max_power:
            max_angle, max_power = a, p
        if p < min_power:
            min_angle, min_power = a, p
    ratio = INFINITE_RATIO if min_power == 0 else max_power / min_power
    return ExtinctionScan(max_angle, max_power, min_angle, min_power, ratio)
