"""Single-photon detector models: Geiger-mode APD with backflash, PMT, Eve's SPCM.

Time is carried as integer picoseconds on click records and photons; profile
and dead-time parameters are configured in nanoseconds.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .optics import JonesVector

PS_PER_NS = 1000
PS_PER_S = 10**12


class Cause(enum.IntEnum):
    SIGNAL = 0
    DARK = 1
    REFLECTION = 2
    BACKFLASH = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Cause":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown click cause {label!r}") from None


@dataclass(frozen=True)
class PhotonEvent:
    time_ps: int
    wavelength_nm: float
    polarization: JonesVector
    origin: Cause = Cause.SIGNAL
    parent_id: int = -1


@dataclass(frozen=True)
class ClickRecord:
    detector_id: str
    time_ps: int
    cause: Cause
    parent_id: int = -1

    def __post_init__(self):
        if self.time_ps < 0:
            raise ValueError("click time must be non-negative")


@dataclass(frozen=True)
class BackflashProfile:
    """Temporal shape of backflash emission after the avalanche starts.

    Density on [0, quench] is (1 - exp(-t/rise)) * exp(-t/decay): an
    exponential build-up followed by capacitive discharge. After quenching a
    `residual_after_quench` fraction of the mass decays with the rise constant.
    """
    rise_time_constant: float = 1.0
    decay_time_constant: float = 8.0
    quench_time: float = 17.0
    residual_after_quench: float = 1e-3

    def __post_init__(self):
        for name in ("rise_time_constant", "decay_time_constant", "quench_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.residual_after_quench < 1:
            raise ValueError("residual_after_quench must lie in [0, 1)")

    def _main_integral(self, t):
        r, d = self.rise_time_constant, self.decay_time_constant
        k = 1 / (1 / r + 1 / d)
        return d * -np.expm1(-t / d) - k * -np.expm1(-t / k)

    def cdf(self, t_ns):
        t = np.asarray(t_ns, dtype=float)
        q, res = self.quench_time, self.residual_after_quench
        tc = np.clip(t, 0.0, q)
        main = (1 - res) * self._main_integral(tc) / self._main_integral(q)
        tail = res * -np.expm1(-np.maximum(t - q, 0.0) / self.rise_time_constant)
        out = np.where(t <= 0, 0.0, main + tail)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Emission delays in ns by inverse-transform sampling."""
        u = rng.random(n)
        q, res = self.quench_time, self.residual_after_quench
        grid = np.linspace(0.0, q, 20001)
        g = self._main_integral(grid)
        g /= g[-1]
        out = np.empty(n)
        main = u < 1 - res
        out[main] = np.interp(u[main] / (1 - res), g, grid)
        if res > 0:
            w = (u[~main] - (1 - res)) / res
            out[~main] = q - self.rise_time_constant * np.log1p(-w)
        return out


@dataclass(frozen=True)
class SpectralDensity:
    """Piecewise-linear relative emission density over wavelength (nm)."""
    points: tuple[tuple[float, float], ...] = ((550.0, 0.2), (900.0, 1.0), (1000.0, 0.8))

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValueError("spectral density needs at least two points")
        lam = [p[0] for p in pts]
        if any(b <= a for a, b in zip(lam, lam[1:])):
            raise ValueError("spectral density wavelengths must be strictly increasing")
        if any(p[1] < 0 for p in pts) or self._areas().sum() <= 0:
            raise ValueError("spectral density must be non-negative with positive area")

    @property
    def support(self) -> tuple[float, float]:
        return self.points[0][0], self.points[-1][0]

    def _arrays(self):
        lam = np.array([p[0] for p in self.points])
        rho = np.array([p[1] for p in self.points])
        return lam, rho

    def _areas(self):
        lam, rho = self._arrays()
        return 0.5 * (rho[1:] + rho[:-1]) * np.diff(lam)

    def pdf(self, wavelength):
        lam, rho = self._arrays()
        w = np.asarray(wavelength, dtype=float)
        val = np.where((w >= lam[0]) & (w <= lam[-1]), np.interp(w, lam, rho), 0.0)
        return val / self._areas().sum()

    def cdf(self, wavelength):
        lam, rho = self._arrays()
        w = np.clip(np.asarray(wavelength, dtype=float), lam[0], lam[-1])
        areas = self._areas()
        cum = np.concatenate([[0.0], np.cumsum(areas)])
        i = np.clip(np.searchsorted(lam, w, side="right") - 1, 0, len(areas) - 1)
        x = w - lam[i]
        slope = (rho[i + 1] - rho[i]) / (lam[i + 1] - lam[i])
        partial = rho[i] * x + 0.5 * slope * x * x
        out = (cum[i] + partial) / cum[-1]
        return float(out) if out.ndim == 0 else out

    def integral(self, lo: float, hi: float) -> float:
        """Probability mass in [lo, hi]."""
        return float(self.cdf(hi) - self.cdf(lo))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lam, rho = self._arrays()
        areas = self._areas()
        cum = np.cumsum(areas)
        u = rng.random(n) * cum[-1]
        i = np.minimum(np.searchsorted(cum, u, side="right"), len(areas) - 1)
        target = u - np.concatenate([[0.0], cum[:-1]])[i]
        slope = (rho[i + 1] - rho[i]) / (lam[i + 1] - lam[i])
        disc = np.sqrt(np.maximum(rho[i] ** 2 + 2 * slope * target, 0.0))
        denom = rho[i] + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.where(denom > 0, 2 * target / denom, 0.0)
        return lam[i] + np.clip(x, 0.0, lam[i + 1] - lam[i])


@dataclass(frozen=True)
class EfficiencyCurve:
    """Detection efficiency vs wavelength; linear interpolation, flat outside."""
    points: tuple[tuple[float, float], ...] = ((800.0, 0.6),)

    def __post_init__(self):
        pts = tuple(sorted((float(a), float(b)) for a, b in self.points))
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ValueError("efficiency curve is empty")
        if any(not 0 <= p[1] <= 1 for p in pts):
            raise ValueError("efficiency values must lie in [0, 1]")

    @classmethod
    def constant(cls, value: float) -> "EfficiencyCurve":
        return cls(((800.0, value),))

    def __call__(self, wavelength):
        lam = [p[0] for p in self.points]
        eff = [p[1] for p in self.points]
        out = np.interp(np.asarray(wavelength, dtype=float), lam, eff)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ApdParams:
    efficiency_curve: EfficiencyCurve = field(default_factory=EfficiencyCurve)
    dark_count_rate: float = 100.0
    dead_time: float = 50.0
    backflash_prob: float = 0.065
    electrons_per_avalanche: float = 2.7e8
    profile: BackflashProfile = field(default_factory=BackflashProfile)
    spectrum: SpectralDensity = field(default_factory=SpectralDensity)
    emission_statistics: str = "poisson"
    jitter_ps: float = 0.0
    electronic_delay: float = 0.0
    kind: str = "apd"

    def __post_init__(self):
        if not 0 <= self.backflash_prob <= 1:
            raise ValueError("backflash_prob must lie in [0, 1]")
        if self.dead_time < 0:
            raise ValueError("dead_time must be non-negative")
        if self.dark_count_rate < 0:
            raise ValueError("dark_count_rate must be non-negative")
        if not self.electrons_per_avalanche > 0:
            raise ValueError("electrons_per_avalanche must be positive")
        if self.emission_statistics not in ("poisson", "single"):
            raise ValueError(f"unknown emission_statistics {self.emission_statistics!r}")
        if self.kind not in ("apd", "pmt"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.jitter_ps < 0:
            raise ValueError("jitter_ps must be non-negative")

    @property
    def effective_backflash_prob(self) -> float:
        return 0.0 if self.kind == "pmt" else self.backflash_prob

    @property
    def dead_time_ps(self) -> int:
        return int(round(self.dead_time * PS_PER_NS))

    @property
    def mean_backflash_photons(self) -> float:
        """Poisson mean giving P(at least one photon) = backflash_prob."""
        p = self.effective_backflash_prob
        if self.emission_statistics == "single":
            return p
        if p >= 1:
            raise ValueError("backflash_prob = 1 has no finite Poisson mean")
        return -math.log1p(-p)


def pmt_params(efficiency: float = 0.4, **kwargs) -> ApdParams:
    """A photomultiplier: same detection contract, no backflash."""
    kwargs.setdefault("efficiency_curve", EfficiencyCurve.constant(efficiency))
    return ApdParams(kind="pmt", backflash_prob=0.0, **kwargs)


@dataclass
class DetectorState:
    detector_id: str
    dead_until_ps: int = -1

    def is_live(self, time_ps: int) -> bool:
        return time_ps >= self.dead_until_ps


def apd_detect(photon: PhotonEvent, params: ApdParams, state: DetectorState,
               rng: np.random.Generator) -> ClickRecord | None:
    if photon.time_ps < 0:
        raise ValueError("photon time must be non-negative")
    if not state.is_live(photon.time_ps):
        return None
    if rng.random() >= params.efficiency_curve(photon.wavelength_nm):
        return None
    state.dead_until_ps = photon.time_ps + params.dead_time_ps
    return ClickRecord(state.detector_id, photon.time_ps, photon.origin, photon.parent_id)


def pmt_detect(photon: PhotonEvent, params: ApdParams, state: DetectorState,
               rng: np.random.Generator) -> ClickRecord | None:
    return apd_detect(photon, replace(params, kind="pmt", backflash_prob=0.0), state, rng)


def draw_backflash_counts(rng: np.random.Generator, n_clicks: int, params: ApdParams) -> np.ndarray:
    """Photons leaving the detector for each of `n_clicks` avalanches."""
    p = params.effective_backflash_prob
    if p == 0 or n_clicks == 0:
        return np.zeros(n_clicks, dtype=np.int64)
    if params.emission_statistics == "single":
        return (rng.random(n_clicks) < p).astype(np.int64)
    return rng.poisson(params.mean_backflash_photons, n_clicks).astype(np.int64)


def random_linear_states(rng: np.random.Generator, n: int):
    """Amplitude arrays of uniformly random linear polarizations (unpolarized light)."""
    theta = rng.random(n) * math.pi
    return np.cos(theta).astype(complex), np.sin(theta).astype(complex)


def backflash_emit(click: ClickRecord, params: ApdParams, rng: np.random.Generator,
                   click_id: int = -1) -> list[PhotonEvent]:
    n = int(draw_backflash_counts(rng, 1, params)[0])
    if n == 0:
        return []
    delays = params.profile.sample(rng, n)
    wavelengths = params.spectrum.sample(rng, n)
    angles = rng.random(n) * 180.0
    return [PhotonEvent(click.time_ps + int(round(d * PS_PER_NS)), float(w),
                        JonesVector.linear(float(a)), Cause.BACKFLASH, click_id)
            for d, w, a in zip(delays, wavelengths, angles)]


def per_electron_probability(p_b: float, n_electrons: float) -> float:
    if not n_electrons > 0:
        raise ValueError("n_electrons must be positive")
    return p_b / n_electrons


def dark_count_times(rate_hz: float, duration_s: float, rng: np.random.Generator,
                     start_ps: int = 0) -> np.ndarray:
    """Sorted integer-ps arrival times of a homogeneous Poisson process."""
    if rate_hz < 0 or duration_s < 0:
        raise ValueError("rate and duration must be non-negative")
    if rate_hz == 0 or duration_s == 0:
        return np.zeros(0, dtype=np.int64)
    n = rng.poisson(rate_hz * duration_s)
    span = duration_s * PS_PER_S
    return start_ps + np.sort(np.floor(rng.random(n) * span).astype(np.int64))


def dead_time_mask(times_ps: np.ndarray, dead_ps: int) -> np.ndarray:
    """Non-paralyzable dead-time filter over sorted candidate times.

    Only candidates closer than `dead_ps` to their predecessor need the
    sequential pass; everything else is accepted outright.
    """
    n = len(times_ps)
    keep = np.ones(n, dtype=bool)
    if n < 2 or dead_ps <= 0:
        return keep
    close = np.flatnonzero(np.diff(times_ps) < dead_ps) + 1
    if len(close) == 0:
        return keep
    t = times_ps.tolist()
    in_close = np.zeros(n, dtype=bool)
    in_close[close] = True
    flags = in_close.tolist()
    last = t[0]
    for i in close.tolist():
        if not flags[i - 1]:
            last = t[i - 1]
        if t[i] - last >= dead_ps:
            last = t[i]
        else:
            keep[i] = False
    return keep


def sequential_dead_time(times_ps: Sequence[int], dead_ps: int) -> list[int]:
    """Reference implementation of the dead-time filter using DetectorState."""
    state = DetectorState("ref")
    kept = []
    for t in times_ps:
        if state.is_live(t):
            kept.append(t)
            state.dead_until_ps = t + dead_ps
    return kept
