"""Estimators and security math: histograms, peaks, backflash probability,
coincidence-ratio matrices, leakage and the tagged-signal key rate.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .devices import PS_PER_NS, Cause
from .eavesdropper import EveSetup, analyzer_probability, gate_pairs
from .optics import CONJUGATE, filter_transmission


class EstimateWarning(UserWarning):
    pass


# --------------------------------------------------------------------------- histograms

@dataclass(frozen=True)
class CoincidenceHistogram:
    bin_width: int
    origin: int
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    @property
    def edges(self) -> np.ndarray:
        return self.origin + self.bin_width * np.arange(len(self.counts) + 1, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow


def build_histogram(pairs, bin_width: int, range_ps: tuple[int, int]) -> CoincidenceHistogram:
    """Histogram of t_click - t_ref over half-open bins [lo, hi).

    `pairs` is a sequence of (t_ref, t_click) or an (n, 2) array. Differences
    outside the range go to the underflow/overflow counters.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    lo, hi = range_ps
    nbins = max(int(math.ceil((hi - lo) / bin_width)), 1)
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return histogram_of_delays(arr[:, 1] - arr[:, 0], bin_width, lo, nbins)


def histogram_of_delays(delays, bin_width: int, origin: int, nbins: int) -> CoincidenceHistogram:
    d = np.asarray(delays, dtype=np.int64)
    idx = np.floor_divide(d - origin, bin_width)
    under = int((idx < 0).sum())
    over = int((idx >= nbins).sum())
    inside = idx[(idx >= 0) & (idx < nbins)]
    return CoincidenceHistogram(int(bin_width), int(origin),
                                np.bincount(inside, minlength=nbins).astype(np.int64), under, over)


def pair_delays(ref_times, click_times, lo: int, hi: int) -> np.ndarray:
    """All differences click - ref falling in [lo, hi), as a start-multi-stop analyzer."""
    r = np.asarray(ref_times, dtype=np.int64)
    c = np.asarray(click_times, dtype=np.int64)
    if len(r) == 0 or len(c) == 0:
        return np.zeros(0, dtype=np.int64)
    first = np.searchsorted(c, r + lo, side="left")
    last = np.searchsorted(c, r + hi, side="left")
    n = last - first
    total = int(n.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    ref_rep = np.repeat(np.arange(len(r)), n)
    starts = np.repeat(first - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
    cidx = starts + np.arange(total)
    return c[cidx] - r[ref_rep]


def delays_from_pulses(click_times, period_ps: int) -> np.ndarray:
    """Delay of each click after the most recent pulse epoch."""
    return np.mod(np.asarray(click_times, dtype=np.int64), period_ps)


@dataclass(frozen=True)
class Peak:
    start: int
    end: int
    area: float
    significance: float
    counts: int


def detect_peaks(hist: CoincidenceHistogram, threshold_sigma: float) -> list[Peak]:
    """Contiguous runs of bins above median background + k*sqrt(background).

    The Poisson scale is floored at one count so an empty background does not
    turn every single stray count into a peak.
    """
    if not threshold_sigma > 0:
        raise ValueError("threshold_sigma must be positive")
    counts = hist.counts.astype(float)
    if len(counts) == 0:
        return []
    bg = float(np.median(counts))
    above = counts > bg + threshold_sigma * math.sqrt(max(bg, 1.0))
    peaks = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], above.astype(np.int8), [0]])))
    for a, b in zip(edges[::2], edges[1::2]):
        run = counts[a:b]
        area = float(run.sum() - bg * len(run))
        noise = math.sqrt(max(bg * len(run), 1.0))
        peaks.append(Peak(int(hist.origin + a * hist.bin_width), int(hist.origin + b * hist.bin_width),
                          area, area / noise, int(run.sum())))
    return peaks


# --------------------------------------------------------------------------- estimators

def estimate_pb(coincidences: float, efficiency: float, transmission: float, clicks: float) -> float:
    """Lower-bound backflash probability C / (eta * T * N).

    Only first-order in P_b; results above one are clamped with a warning.
    """
    if clicks <= 0:
        raise ValueError("clicks N must be positive")
    if not 0 < efficiency <= 1 or not 0 < transmission <= 1:
        raise ValueError("efficiency and transmission must lie in (0, 1]")
    value = coincidences / (efficiency * transmission * clicks)
    if value > 1:
        warnings.warn(f"backflash estimate {value:.3g} exceeds 1; clamped", EstimateWarning)
        return 1.0
    return value


def estimate_pb_sigma(coincidences: float, efficiency: float, transmission: float, clicks: float) -> float:
    """Binomial standard error of `estimate_pb`."""
    p = min(max(coincidences / clicks, 0.0), 1.0)
    return math.sqrt(p * (1 - p) / clicks) / (efficiency * transmission)


def expected_leakage(efficiency: float, t_e: float, t_b: float, p_b: float) -> float:
    for v in (efficiency, t_e, t_b, p_b):
        if not 0 <= v <= 1:
            raise ValueError("all factors must lie in [0, 1]")
    return efficiency * t_e * t_b * p_b / 2


def worst_case_tag_fraction(p_b: float, t_b: float) -> float:
    if not (0 <= p_b <= 1 and 0 <= t_b <= 1):
        raise ValueError("p_b and t_b must lie in [0, 1]")
    return p_b * t_b


# --------------------------------------------------------------------------- R matrix

@dataclass(frozen=True)
class RMatrix:
    """Coincidence ratios R_ij = E_ij / B_ij for Bob channel i and Eve setting j."""
    rows: tuple
    cols: tuple
    coincidences: np.ndarray
    clicks: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.clicks > 0, self.coincidences / np.maximum(self.clicks, 1), 0.0)

    def ratio(self, i: str, j: str) -> float:
        return float(self.ratios[self.rows.index(i), self.cols.index(j)])

    @classmethod
    def from_counts(cls, counts: Mapping[tuple[str, str], tuple[int, int]]) -> "RMatrix":
        rows = tuple(dict.fromkeys(i for i, _ in counts))
        cols = tuple(dict.fromkeys(j for _, j in counts))
        e = np.zeros((len(rows), len(cols)), dtype=np.int64)
        b = np.zeros_like(e)
        for (i, j), (ec, bc) in counts.items():
            e[rows.index(i), cols.index(j)] = ec
            b[rows.index(i), cols.index(j)] = bc
        return cls(rows, cols, e, b)


def coincidence_ratio_matrix(logs: Mapping[str, object], window_ps: tuple[int, int],
                             channels: Sequence[str] | None = None) -> RMatrix:
    """R matrix from one event log per Eve analyzer setting."""
    counts = {}
    for j, log in logs.items():
        eve_t = log.times("EVE")
        for i in (channels or log.bob_channels):
            bt = log.times(i)
            if len(bt) == 0:
                raise ValueError(f"no Bob clicks in cell ({i}, {j}); R_{i}{j} undefined")
            counts[(i, j)] = (len(gate_pairs(bt, eve_t, window_ps)[0]), len(bt))
    return RMatrix.from_counts(counts)


def tagged_coincidences(log, bob_channel: str) -> int:
    """Ground truth: Eve clicks caused by backflash from a click on `bob_channel`."""
    eve = log.mask("EVE") & (log.cause == Cause.BACKFLASH)
    parents = log.parent_id[eve]
    return int(log.mask(bob_channel)[parents].sum())


def observed_leakage(r: RMatrix, channel: str) -> float:
    """R_ii minus R_i,conj(i); negative values are returned as they are."""
    return r.ratio(channel, channel) - r.ratio(channel, CONJUGATE[channel])


# --------------------------------------------------------------------------- key rate

def binary_entropy(x: float) -> float:
    if not 0 <= x <= 1:
        raise ValueError(f"binary entropy argument {x} outside [0, 1]")
    if x == 0 or x == 1:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def leak_ec_estimate(qber: float, p_det: float, inefficiency: float = 1.2) -> float:
    """Error-correction leakage f * h(e) * P_det per signal."""
    return inefficiency * binary_entropy(qber) * p_det


@dataclass(frozen=True)
class KeyRateInput:
    p_det: float
    qber: float
    leak_ec: float
    p_e: float = 0.0

    def __post_init__(self):
        for name in ("p_det", "qber", "leak_ec", "p_e"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class KeyRateResult:
    rate: float
    correction: float
    abort_reason: str = ""


def key_rate_detail(inp: KeyRateInput) -> KeyRateResult:
    """Single-photon BB84 rate with a fraction p_e of detections tagged by Eve.

    l = A * P_det * (1 - h(e/A)) - leak_EC with A = (P_det - P_E) / P_det,
    clamped at zero. The abort reason separates a fully tagged key from an
    error rate beyond the entropy domain.
    """
    if inp.p_det == 0:
        raise ValueError("p_det must be positive")
    a = (inp.p_det - inp.p_e) / inp.p_det
    if a <= 0:
        return KeyRateResult(0.0, a, "tagged_fraction")
    x = inp.qber / a
    if x > 0.5:
        return KeyRateResult(0.0, a, "qber_over_half")
    rate = a * inp.p_det * (1 - binary_entropy(x)) - inp.leak_ec
    if rate <= 0:
        return KeyRateResult(0.0, a, "negative_rate")
    return KeyRateResult(rate, a)


def key_rate(inp: KeyRateInput) -> float:
    return key_rate_detail(inp).rate


# --------------------------------------------------------------------------- fits

def fit_malus(angles_deg, rates) -> tuple[float, float, float, float]:
    """Least-squares fit of offset + amplitude*cos^2(angle - phase).

    Returns (offset, amplitude, phase_deg, r_squared).
    """
    th = np.radians(np.asarray(angles_deg, dtype=float))
    y = np.asarray(rates, dtype=float)
    basis = np.column_stack([np.ones_like(th), np.cos(2 * th), np.sin(2 * th)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    c0, c1, c2 = coef
    amp = 2 * math.hypot(c1, c2)
    phase = math.degrees(0.5 * math.atan2(c2, c1)) % 180.0
    resid = y - basis @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return c0 - amp / 2, amp, phase, r2


# --------------------------------------------------------------------------- in-model predictions

def _spectral_average(spectrum, weight) -> float:
    lo, hi = spectrum.support
    grid = np.linspace(lo, hi, 40001)
    return float(np.trapezoid(spectrum.pdf(grid) * weight(grid), grid))


def _hit_probability(mean_photons: float, per_photon: float, statistics: str, p_b: float) -> float:
    if statistics == "single":
        return p_b * per_photon
    return -math.expm1(-mean_photons * per_photon)


def predicted_coincidence_ratio(config, bob_channel: str, eve: EveSetup | None = None) -> float:
    """Expected R for one Bob channel under the simulator's own model.

    Includes the unpolarized port factor, the receiver's output extinction,
    Eve's analyzer and distortion, the gate's share of the emission profile
    and accidental dark counts; neglects dead-time interplay and multi-click
    pulses.
    """
    eve = eve or config.eve
    rx = config.receiver
    bob = config.detectors[bob_channel]
    ratio = rx.basis_ratio(bob_channel)
    aligned = 1.0 if math.isinf(ratio) else ratio / (ratio + 1)
    port = 0.5 / aligned
    spectral = _spectral_average(bob.spectrum, lambda lam: (
        rx.reverse_transmission[bob_channel] * filter_transmission(lam, rx.entrance_filter)
        * eve.spcm.efficiency_curve(lam)))
    out_ratio = rx.output_ratio(bob_channel)
    leak = 0.0 if math.isinf(out_ratio) else 1 / (out_ratio + 1)
    ang = math.radians(rx.channel_axes[bob_channel])
    conj = math.radians(rx.channel_axes[CONJUGATE[bob_channel]])
    p_eig = float(analyzer_probability(complex(math.cos(ang)), complex(math.sin(ang)), eve))
    p_conj = float(analyzer_probability(complex(math.cos(conj)), complex(math.sin(conj)), eve))
    analyzer = (1 - leak) * p_eig + leak * p_conj
    offset = (rx.channel_delay[bob_channel] + eve.path_delay
              + eve.spcm.electronic_delay - bob.electronic_delay)
    w0, w1 = eve.gate_window
    window = bob.profile.cdf(w1 - offset) - bob.profile.cdf(w0 - offset)
    per_photon = port * spectral * analyzer * window
    signal = _hit_probability(bob.mean_backflash_photons, per_photon, bob.emission_statistics,
                              bob.effective_backflash_prob)
    accidental = -math.expm1(-eve.spcm.dark_count_rate * (w1 - w0) * 1e-9)
    return 1 - (1 - signal) * (1 - accidental)


def predicted_leakage(config, channel: str, angles: Mapping[str, float]) -> float:
    """In-model R_ii - R_i,conj(i) for Eve analyzer angles keyed by channel label."""
    r_same = predicted_coincidence_ratio(config, channel, config.eve.at_angle(angles[channel]))
    conj = CONJUGATE[channel]
    r_conj = predicted_coincidence_ratio(config, channel, config.eve.at_angle(angles[conj]))
    return r_same - r_conj


def predicted_pair_coincidence(config) -> float:
    """Probability a DUT click yields an SPCM click through the link (any delay)."""
    dut, spcm = config.detectors["DUT"], config.detectors["SPCM"]
    link = config.link
    per_photon = link.transmission * _spectral_average(
        dut.spectrum, lambda lam: filter_transmission(lam, link.filter) * spcm.efficiency_curve(lam))
    return _hit_probability(dut.mean_backflash_photons, per_photon, dut.emission_statistics,
                            dut.effective_backflash_prob)


def in_band_backflash_prob(config) -> float:
    """The P_b a perfect estimator would report behind the link's filter."""
    dut = config.detectors["DUT"]
    frac = _spectral_average(dut.spectrum, lambda lam: filter_transmission(lam, config.link.filter))
    return _hit_probability(dut.mean_backflash_photons, frac, dut.emission_statistics,
                            dut.effective_backflash_prob)


def ns(ps: int | float) -> float:
    return ps / PS_PER_NS
