"""Eve's tap, polarization analyzer, gated SPCM and coincidence pairing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .devices import PS_PER_NS, ApdParams, ClickRecord, DetectorState, PhotonEvent, apd_detect
from .optics import PbsSpec, WaveplateSpec, apply_waveplate, transmit_probability


def _default_spcm():
    return ApdParams(backflash_prob=0.0)


@dataclass(frozen=True)
class EveSetup:
    tap_to_eve: float = 0.9
    measurement_throughput: float = 0.60
    analysis_pbs: PbsSpec = field(default_factory=PbsSpec)
    distortion: WaveplateSpec = field(default_factory=WaveplateSpec)
    spcm: ApdParams = field(default_factory=_default_spcm)
    gate_window: tuple = (25.0, 30.0)
    gate_reference: str = "bob_click"
    path_delay: float = 9.0

    def __post_init__(self):
        if not 0 <= self.tap_to_eve <= 1:
            raise ValueError("tap_to_eve must lie in [0, 1]")
        if not 0 <= self.measurement_throughput <= 1:
            raise ValueError("measurement_throughput must lie in [0, 1]")
        start, end = self.gate_window
        if not start < end:
            raise ValueError("gate_window start must be before its end")
        object.__setattr__(self, "gate_window", (float(start), float(end)))
        if self.gate_reference not in ("bob_click", "alice_pulse"):
            raise ValueError(f"unknown gate_reference {self.gate_reference!r}")
        if self.path_delay < 0:
            raise ValueError("path_delay must be non-negative")
        # Eve's own detector backflash is not modelled
        if self.spcm.backflash_prob:
            object.__setattr__(self, "spcm", replace(self.spcm, backflash_prob=0.0))

    @property
    def window_ps(self) -> tuple[int, int]:
        return (int(round(self.gate_window[0] * PS_PER_NS)), int(round(self.gate_window[1] * PS_PER_NS)))

    @property
    def path_delay_ps(self) -> int:
        return int(round(self.path_delay * PS_PER_NS))

    def at_angle(self, angle_deg: float) -> "EveSetup":
        return replace(self, analysis_pbs=self.analysis_pbs.rotated(angle_deg))


def analyzer_probability(amp_h, amp_v, setup: EveSetup):
    """Probability a photon at the tap point reaches Eve's SPCM (before its efficiency)."""
    h, v = apply_waveplate(amp_h, amp_v, setup.distortion)
    p = transmit_probability(h, v, setup.analysis_pbs.axis_angle, setup.analysis_pbs.extinction_ratio)
    return setup.tap_to_eve * setup.measurement_throughput * p


def intercept_mask(amp_h, amp_v, wavelength, setup: EveSetup, rng: np.random.Generator) -> np.ndarray:
    """Which photons become detection candidates at Eve's SPCM."""
    p = analyzer_probability(amp_h, amp_v, setup) * setup.spcm.efficiency_curve(np.asarray(wavelength))
    return rng.random(len(amp_h)) < p


def eve_intercept(photon: PhotonEvent, setup: EveSetup, rng: np.random.Generator,
                  state: DetectorState | None = None) -> ClickRecord | None:
    state = state or DetectorState("EVE")
    pol = photon.polarization
    p = float(analyzer_probability(pol.amplitude_h, pol.amplitude_v, setup))
    if rng.random() >= p:
        return None
    arriving = replace(photon, time_ps=photon.time_ps + setup.path_delay_ps)
    return apd_detect(arriving, setup.spcm, state, rng)


def _require_sorted(times: np.ndarray, what: str) -> None:
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ValueError(f"{what} clicks are not time-sorted")


def gate_pairs(bob_times, eve_times, window_ps: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Pair each Eve click with the closest Bob click inside the window.

    A pair needs start <= eve - bob < end. Each Eve click takes at most one
    Bob click: the closest in time, the earlier Bob click on ties. Returns
    index arrays (bob_idx, eve_idx) ordered by Eve click.
    """
    b = np.asarray(bob_times, dtype=np.int64)
    e = np.asarray(eve_times, dtype=np.int64)
    _require_sorted(b, "Bob")
    _require_sorted(e, "Eve")
    start, end = window_ps
    if len(b) == 0 or len(e) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    lo = np.searchsorted(b, e - end, side="right")
    hi = np.searchsorted(b, e - start, side="right")
    p = np.searchsorted(b, e, side="right")
    c1 = np.minimum(p, hi) - 1
    ok1 = c1 >= lo
    c1s = np.clip(c1, 0, len(b) - 1)
    c1s = np.searchsorted(b, b[c1s], side="left")
    c2 = np.maximum(p, lo)
    ok2 = c2 < hi
    c2s = np.clip(c2, 0, len(b) - 1)
    d1 = np.where(ok1, e - b[c1s], np.iinfo(np.int64).max)
    d2 = np.where(ok2, b[c2s] - e, np.iinfo(np.int64).max)
    pick_first = ok1 & (d1 <= d2)
    chosen = np.where(pick_first, c1s, c2s)
    valid = ok1 | ok2
    return chosen[valid].astype(np.int64), np.flatnonzero(valid).astype(np.int64)


def gate_coincidences(bob_clicks: Sequence[ClickRecord], eve_clicks: Sequence[ClickRecord],
                      setup: EveSetup) -> list[tuple[ClickRecord, ClickRecord]]:
    bi, ei = gate_pairs([c.time_ps for c in bob_clicks], [c.time_ps for c in eve_clicks],
                        setup.window_ps)
    return [(bob_clicks[i], eve_clicks[j]) for i, j in zip(bi.tolist(), ei.tolist())]


@dataclass(frozen=True)
class AngleScan:
    angles: np.ndarray
    rates: np.ndarray
    coincidences: np.ndarray
    references: np.ndarray

    @property
    def argmax(self) -> float:
        return float(self.angles[int(np.argmax(self.rates))])

    @property
    def argmin(self) -> float:
        return float(self.angles[int(np.argmin(self.rates))])

    @property
    def max_min_ratio(self) -> float:
        lo = float(np.min(self.rates))
        return math.inf if lo == 0 else float(np.max(self.rates)) / lo


def coincidence_rate(log, setup: EveSetup, channels: Sequence[str] | None = None) -> tuple[int, int]:
    """(gated coincidences, reference clicks) for the Bob channels given."""
    bob = [c for c in log.bob_channels if channels is None or c in channels]
    eve_t = log.times("EVE")
    n_coinc = n_ref = 0
    for ch in bob:
        bt = log.times(ch)
        n_ref += len(bt)
        n_coinc += len(gate_pairs(bt, eve_t, setup.window_ps)[0])
    return n_coinc, n_ref


def _scan_point(args):
    from .engine import run_scenario
    config, angle, trial, channels = args
    cfg = replace(config, eve=config.eve.at_angle(angle))
    log = run_scenario(cfg, trial_index=trial)
    coinc, ref = coincidence_rate(log, cfg.eve, channels)
    if ref == 0:
        # no Bob reference: fall back to Eve's raw click rate
        return len(log.times("EVE")), max(log.duration_ps, 1) / 1e12
    return coinc, ref


def angle_scan(config, angles: Sequence[float], channels: Sequence[str] | None = None,
               jobs: int = 1) -> AngleScan:
    """Run the scenario once per analyzer angle on independent RNG streams."""
    if len(angles) == 0:
        raise ValueError("angle list is empty")
    if config.eve is None:
        raise ValueError("angle scan needs an eavesdropper in the scenario")
    work = [(config, float(a), k + 1, channels) for k, a in enumerate(angles)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scan_point, work))
    else:
        results = [_scan_point(w) for w in work]
    coinc = np.array([r[0] for r in results], dtype=float)
    ref = np.array([r[1] for r in results], dtype=float)
    return AngleScan(np.asarray(angles, dtype=float), coinc / ref, coinc, ref)
