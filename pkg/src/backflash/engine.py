"""Seeded Monte Carlo orchestration: Alice's pulses through Bob, Bob's backflash to Eve.

Two topologies are supported:

``receiver``
    Alice's pulse train enters Bob's four-channel receiver; clicks emit
    backflash that routes back out through the receiver to Eve's tap. Light
    only flows Alice -> Bob -> Eve, so every stage is evaluated in bulk.
``detector_pair``
    Two detectors (DUT and SPCM) facing each other through a fiber. Each one's
    backflash can trigger the other, so events are resolved in time order.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .devices import (PS_PER_NS, PS_PER_S, ApdParams, Cause, EfficiencyCurve, dark_count_times,
                      dead_time_mask, draw_backflash_counts, random_linear_states)
from .eavesdropper import EveSetup, intercept_mask
from .optics import CHANNEL_ANGLES, FilterSpec, filter_transmission
from .receiver import CHANNELS, ReceiverModel, route_forward, route_reverse

CHUNK_PULSES = 1 << 20

# stage numbers composing RngStreamKey.event_index
STAGE_PULSES = 1
STAGE_DARK = 2
STAGE_BACKFLASH = 3
STAGE_EVE = 4
STAGE_JITTER = 5
STAGE_PAIR = 6


@dataclass(frozen=True)
class RngStreamKey:
    seed: int
    trial_index: int = 0
    event_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.trial_index, self.event_index))
        return np.random.Generator(np.random.Philox(ss))


def stream(seed: int, trial: int, stage: int, sub: int = 0) -> np.random.Generator:
    return RngStreamKey(seed, trial, stage * 1_000_000 + sub).generator()


@dataclass(frozen=True)
class SourceConfig:
    period: float = 200.0
    width: float = 3.0
    count: int = 10**6
    mean_photons: float = 0.1
    policy: str = "random"
    polarization: str = "H"
    wavelength: float = 785.0

    def __post_init__(self):
        if not self.period > self.width > 0:
            raise ValueError("source needs period > width > 0")
        if self.count < 0:
            raise ValueError("source.count must be non-negative")
        if self.mean_photons < 0:
            raise ValueError("source.mean_photons must be non-negative")
        if self.policy not in ("random", "fixed"):
            raise ValueError(f"unknown source.policy {self.policy!r}")
        polarization_angle(self.polarization)

    @property
    def period_ps(self) -> int:
        return int(round(self.period * PS_PER_NS))

    @property
    def width_ps(self) -> int:
        return int(round(self.width * PS_PER_NS))


def polarization_angle(label) -> float:
    if isinstance(label, str):
        if label in CHANNEL_ANGLES:
            return CHANNEL_ANGLES[label]
        try:
            return float(label)
        except ValueError:
            raise ValueError(f"unknown polarization {label!r}") from None
    return float(label)


@dataclass(frozen=True)
class LinkConfig:
    """Fiber between the two detectors of the detector-pair topology."""
    transmission: float = 0.97
    delay: float = 10.0
    filter: FilterSpec | None = None

    def __post_init__(self):
        if not 0 <= self.transmission <= 1:
            raise ValueError("link.transmission must lie in [0, 1]")
        if self.delay <= 0:
            raise ValueError("link.delay must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    topology: str = "receiver"
    source: SourceConfig = field(default_factory=SourceConfig)
    receiver: ReceiverModel = field(default_factory=ReceiverModel)
    detectors: dict = field(default_factory=lambda: {c: ApdParams() for c in CHANNELS})
    eve: EveSetup | None = field(default_factory=EveSetup)
    link: LinkConfig = field(default_factory=LinkConfig)
    seed: int = 1
    target_clicks: int | None = None
    duration: float | None = None
    eve_angles: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.topology not in ("receiver", "detector_pair"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.topology == "receiver":
            for name in self.detectors:
                if name not in CHANNELS:
                    raise ValueError(f"receiver detectors must be among {CHANNELS}, got {name!r}")
        elif set(self.detectors) != {"DUT", "SPCM"}:
            raise ValueError("detector_pair topology needs exactly the detectors DUT and SPCM")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.target_clicks is not None and self.target_clicks < 0:
            raise ValueError("target_clicks must be non-negative")
        if self.duration is not None and self.duration < 0:
            raise ValueError("duration must be non-negative")
        if self.eve_angles and self.eve is None:
            raise ValueError("eve_angles needs an eve section")

    @property
    def duration_ps(self) -> int:
        pulses = self.source.count * self.source.period_ps
        if self.duration is not None:
            return max(pulses, int(round(self.duration * PS_PER_S)))
        return pulses


@dataclass(frozen=True)
class PulseTrain:
    epoch_ps: np.ndarray
    angle_deg: np.ndarray
    photons: np.ndarray
    first_index: int = 0


def generate_pulse_train(source: SourceConfig, rng: np.random.Generator,
                         start: int = 0, stop: int | None = None) -> PulseTrain:
    stop = source.count if stop is None else stop
    m = max(stop - start, 0)
    idx = np.arange(start, start + m, dtype=np.int64)
    photons = (rng.poisson(source.mean_photons, m) if source.mean_photons > 0
               else np.zeros(m, dtype=np.int64))
    if source.policy == "random":
        table = np.array([CHANNEL_ANGLES[c] for c in CHANNELS])
        angles = table[rng.integers(0, 4, m)]
    else:
        angles = np.full(m, polarization_angle(source.polarization))
    return PulseTrain(idx * source.period_ps, angles, photons.astype(np.int64), start)


@dataclass
class EventLog:
    """Time-ordered click record with ground-truth genealogy.

    `parent_id` points at a pulse index for signal and reflection clicks, at
    another row of this log for backflash clicks, and is -1 for dark counts.
    """
    detectors: tuple
    roles: dict
    channel: np.ndarray
    time_ps: np.ndarray
    cause: np.ndarray
    parent_id: np.ndarray
    true_time_ps: np.ndarray
    pulse_period_ps: int = 0
    pulse_count: int = 0
    duration_ps: int = 0

    def __len__(self):
        return len(self.time_ps)

    def _code(self, name: str) -> int:
        try:
            return self.detectors.index(name)
        except ValueError:
            return -1

    def mask(self, name: str) -> np.ndarray:
        return self.channel == self._code(name)

    def times(self, name: str) -> np.ndarray:
        return self.time_ps[self.mask(name)]

    @property
    def bob_channels(self) -> list[str]:
        return [d for d in self.detectors if self.roles.get(d) == "bob"]

    def channel_names(self) -> np.ndarray:
        return np.asarray(self.detectors, dtype=object)[self.channel]


class _ClickSet:
    """Accumulates clicks per detector before final sorting and id assignment."""

    def __init__(self):
        self.parts = []

    def add(self, det, true_t, cause, parent, parent_is_click=False):
        n = len(true_t)
        self.parts.append((np.full(n, det, dtype=np.int16), np.asarray(true_t, dtype=np.int64),
                           np.broadcast_to(np.asarray(cause, dtype=np.int8), (n,)).copy(),
                           np.asarray(parent, dtype=np.int64),
                           np.full(n, parent_is_click, dtype=bool)))

    def build(self, config: ScenarioConfig, names, roles, params_of, trial, duration_ps):
        if self.parts:
            det, true_t, cause, parent, is_click = (np.concatenate(x) for x in zip(*self.parts))
        else:
            det = np.zeros(0, np.int16)
            true_t = np.zeros(0, np.int64)
            cause = np.zeros(0, np.int8)
            parent = np.zeros(0, np.int64)
            is_click = np.zeros(0, bool)
        recorded = true_t.copy()
        for k, name in enumerate(names):
            sel = det == k
            p = params_of(name)
            recorded[sel] += int(round(p.electronic_delay * PS_PER_NS))
            if p.jitter_ps > 0 and sel.any():
                rng = stream(config.seed, trial, STAGE_JITTER, k)
                recorded[sel] += np.rint(rng.normal(0.0, p.jitter_ps, sel.sum())).astype(np.int64)
        np.maximum(recorded, 0, out=recorded)
        order = np.lexsort((np.arange(len(recorded)), det, recorded))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        parent = parent.copy()
        parent[is_click] = rank[parent[is_click]]
        return EventLog(tuple(names), dict(roles), det[order], recorded[order], cause[order],
                        parent[order], true_t[order], config.source.period_ps,
                        config.source.count, duration_ps)


def run_scenario(config: ScenarioConfig, trial_index: int = 0) -> EventLog:
    if config.topology == "receiver":
        return _run_receiver(config, trial_index)
    return _run_detector_pair(config, trial_index)


def _photons_of(train: PulseTrain, source: SourceConfig, rng):
    pidx = np.repeat(np.arange(len(train.photons)), train.photons)
    t = train.epoch_ps[pidx] + np.floor(rng.random(len(pidx)) * source.width_ps).astype(np.int64)
    ang = np.radians(train.angle_deg[pidx])
    return pidx + train.first_index, t, np.cos(ang).astype(complex), np.sin(ang).astype(complex)


def _run_receiver(config: ScenarioConfig, trial: int) -> EventLog:
    src, rx, eve = config.source, config.receiver, config.eve
    names = [c for c in CHANNELS if c in config.detectors]
    roles = {c: "bob" for c in names}
    if eve is not None:
        names.append("EVE")
        roles["EVE"] = "eve"
    code = {n: k for k, n in enumerate(names)}
    lam0 = src.wavelength
    entrance_taps = [t for t in rx.reflection_taps if t.channel is None]
    channel_taps = [t for t in rx.reflection_taps if t.channel is not None]

    bob_cand = {c: [] for c in names if c != "EVE"}
    eve_bound = []  # (t_at_tap, amp_h, amp_v, wavelength, cause, parent, parent_is_click)

    for chunk, start in enumerate(range(0, src.count, CHUNK_PULSES)):
        rng = stream(config.seed, trial, STAGE_PULSES, chunk)
        train = generate_pulse_train(src, rng, start, min(start + CHUNK_PULSES, src.count))
        pulse, t, h, v = _photons_of(train, src, rng)
        lam = np.full(len(t), lam0)
        for tap in entrance_taps:
            hit = rng.random(len(t)) < tap.reflectance
            if hit.any():
                eve_bound.append((t[hit] + int(round(tap.delay * PS_PER_NS)), h[hit], v[hit],
                                  lam[hit], Cause.REFLECTION, pulse[hit], False))
                keep = ~hit
                pulse, t, h, v, lam = pulse[keep], t[keep], h[keep], v[keep], lam[keep]
        ch = route_forward(h, v, lam, rx, rng)
        for tap in channel_taps:
            on = ch == CHANNELS.index(tap.channel)
            hit = on & (rng.random(len(t)) < tap.reflectance)
            if hit.any():
                ang = np.radians(rx.channel_axes[tap.channel])
                n = int(hit.sum())
                eve_bound.append((t[hit] + int(round(tap.delay * PS_PER_NS)),
                                  np.full(n, np.cos(ang), complex), np.full(n, np.sin(ang), complex),
                                  lam[hit], Cause.REFLECTION, pulse[hit], False))
                ch = np.where(hit, -1, ch)
        u = rng.random(len(t))
        for c in bob_cand:
            on = ch == CHANNELS.index(c)
            det = on & (u < config.detectors[c].efficiency_curve(lam))
            bob_cand[c].append((t[det] + rx.channel_delay_ps(c), pulse[det]))

    clicks = _ClickSet()
    duration_ps = config.duration_ps
    bob_clicks = {}
    for c, parts in bob_cand.items():
        p = config.detectors[c]
        rng = stream(config.seed, trial, STAGE_DARK, code[c])
        dark = dark_count_times(p.dark_count_rate, duration_ps / PS_PER_S, rng)
        t = np.concatenate([x[0] for x in parts] + [dark])
        parent = np.concatenate([x[1] for x in parts] + [np.full(len(dark), -1, np.int64)])
        cause = np.concatenate([np.full(len(t) - len(dark), Cause.SIGNAL, np.int8),
                                np.full(len(dark), Cause.DARK, np.int8)])
        order = np.argsort(t, kind="stable")
        t, parent, cause = t[order], parent[order], cause[order]
        keep = dead_time_mask(t, p.dead_time_ps)
        bob_clicks[c] = (t[keep], parent[keep], cause[keep])

    # provisional click ids are positions in the concatenation order below
    offset = 0
    for c, (t, parent, cause) in bob_clicks.items():
        clicks.add(code[c], t, cause, parent)
        p = config.detectors[c]
        rng = stream(config.seed, trial, STAGE_BACKFLASH, code[c])
        counts = draw_backflash_counts(rng, len(t), p)
        n = int(counts.sum())
        if n and eve is not None:
            src_click = np.repeat(np.arange(len(t)), counts)
            emit = t[src_click] + np.rint(p.profile.sample(rng, n) * PS_PER_NS).astype(np.int64)
            lam = p.spectrum.sample(rng, n)
            h, v = random_linear_states(rng, n)
            ok, oh, ov = route_reverse(h, v, lam, c, rx, rng)
            eve_bound.append((emit[ok] + rx.channel_delay_ps(c), oh[ok], ov[ok], lam[ok],
                              Cause.BACKFLASH, src_click[ok] + offset, True))
        offset += len(t)

    if eve is not None:
        rng = stream(config.seed, trial, STAGE_EVE)
        cand_t, cand_cause, cand_parent, cand_isclick = [], [], [], []
        for t, h, v, lam, cause, parent, is_click in eve_bound:
            hit = intercept_mask(h, v, lam, eve, rng)
            cand_t.append(t[hit] + eve.path_delay_ps)
            cand_cause.append(np.full(int(hit.sum()), cause, np.int8))
            cand_parent.append(parent[hit])
            cand_isclick.append(np.full(int(hit.sum()), is_click))
        dark = dark_count_times(eve.spcm.dark_count_rate, duration_ps / PS_PER_S,
                                stream(config.seed, trial, STAGE_DARK, code["EVE"]))
        t = np.concatenate(cand_t + [dark])
        cause = np.concatenate(cand_cause + [np.full(len(dark), Cause.DARK, np.int8)])
        parent = np.concatenate(cand_parent + [np.full(len(dark), -1, np.int64)])
        is_click = np.concatenate(cand_isclick + [np.zeros(len(dark), bool)])
        order = np.argsort(t, kind="stable")
        t, cause, parent, is_click = t[order], cause[order], parent[order], is_click[order]
        keep = dead_time_mask(t, eve.spcm.dead_time_ps)
        t, cause, parent, is_click = t[keep], cause[keep], parent[keep], is_click[keep]
        for flag in (True, False):
            sel = is_click == flag
            clicks.add(code["EVE"], t[sel], cause[sel], parent[sel], parent_is_click=flag)

    def params_of(name):
        return eve.spcm if name == "EVE" else config.detectors[name]

    return clicks.build(config, names, roles, params_of, trial, duration_ps)


class _BackflashPool:
    """Backflash draws for one detector, consumed in click order."""

    BLOCK = 1 << 16

    def __init__(self, params: ApdParams, rng: np.random.Generator, link: LinkConfig,
                 receiver_eff: EfficiencyCurve):
        self.params, self.rng, self.link, self.eff = params, rng, link, receiver_eff
        self._counts = []
        self._photons = []

    def next_count(self) -> int:
        if not self._counts:
            self._counts = draw_backflash_counts(self.rng, self.BLOCK, self.params).tolist()[::-1]
        return self._counts.pop()

    def next_photon(self):
        """(delay_ps, detected_at_other_end) for one emitted photon."""
        if not self._photons:
            n = self.BLOCK
            delay = np.rint(self.params.profile.sample(self.rng, n) * PS_PER_NS).astype(np.int64)
            lam = self.params.spectrum.sample(self.rng, n)
            p = self.link.transmission * filter_transmission(lam, self.link.filter) * self.eff(lam)
            hit = self.rng.random(n) < p
            self._photons = list(zip(delay.tolist(), hit.tolist()))[::-1]
        return self._photons.pop()


def _run_detector_pair(config: ScenarioConfig, trial: int) -> EventLog:
    names = ["DUT", "SPCM"]
    roles = {"DUT": "dut", "SPCM": "spcm"}
    params = [config.detectors[n] for n in names]
    src, link = config.source, config.link
    link_ps = int(round(link.delay * PS_PER_NS))
    dead = [p.dead_time_ps for p in params]

    # laser pulses, when configured, illuminate the DUT directly
    sig_t, sig_parent = [np.zeros(0, np.int64)], [np.zeros(0, np.int64)]
    n_pulse_photons = src.count if src.mean_photons > 0 else 0
    for chunk, start in enumerate(range(0, n_pulse_photons, CHUNK_PULSES)):
        rng = stream(config.seed, trial, STAGE_PULSES, chunk)
        train = generate_pulse_train(src, rng, start, min(start + CHUNK_PULSES, src.count))
        pulse, t, _, _ = _photons_of(train, src, rng)
        det = rng.random(len(t)) < params[0].efficiency_curve(src.wavelength)
        sig_t.append(t[det])
        sig_parent.append(pulse[det])
    sig_t = np.concatenate(sig_t)
    sig_parent = np.concatenate(sig_parent)

    target = config.target_clicks
    if target is None or config.duration is not None:
        target = None
        horizon = config.duration_ps
    else:
        span_s = config.duration_ps / PS_PER_S
        rate = params[0].dark_count_rate + (len(sig_t) / span_s if span_s else 0.0)
        horizon = max(config.duration_ps, int(1.05 * target / rate * PS_PER_S) if rate else 0, 1)

    pools = [_BackflashPool(params[k], stream(config.seed, trial, STAGE_PAIR, k), link,
                            params[1 - k].efficiency_curve) for k in (0, 1)]
    out = []  # (det, t, cause, parent, parent_is_click)
    heap = []
    seq = 0
    last_dead = [-1, -1]
    n_dut = 0
    stop_ps = None
    tail_ps = max(dead) + link_ps + 2 * int(params[0].profile.quench_time * PS_PER_NS) + 100 * PS_PER_NS
    seg_start, segment = 0, 0
    while True:
        seg_end = seg_start + horizon
        parts = []
        for k, p in enumerate(params):
            rng = stream(config.seed, trial, STAGE_DARK, 2 * segment + k)
            dt = dark_count_times(p.dark_count_rate, horizon / PS_PER_S, rng, seg_start)
            parts.append((dt, np.full(len(dt), k), np.full(len(dt), int(Cause.DARK)), np.full(len(dt), -1)))
        if segment == 0:
            parts.append((sig_t, np.zeros(len(sig_t), int), np.full(len(sig_t), int(Cause.SIGNAL)), sig_parent))
        bt = np.concatenate([q[0] for q in parts])
        order = np.argsort(bt, kind="stable")
        b_t = bt[order].tolist()
        b_det, b_cause, b_parent = (np.concatenate([q[j] for q in parts])[order].tolist() for j in (1, 2, 3))
        i, nb = 0, len(b_t)
        finished = False
        while True:
            if heap and (i >= nb or heap[0][0] <= b_t[i]):
                if heap[0][0] >= seg_end:
                    break
                t, _, k, cause, parent, is_click = heapq.heappop(heap)
            elif i < nb:
                t, k, cause, parent, is_click = b_t[i], b_det[i], b_cause[i], b_parent[i], False
                i += 1
            else:
                break
            if stop_ps is not None:
                if t > stop_ps + tail_ps:
                    finished = True
                    break
                if k == 0:
                    continue
            if t < last_dead[k]:
                continue
            last_dead[k] = t + dead[k]
            cid = len(out)
            out.append((k, t, cause, parent, is_click))
            if k == 0:
                n_dut += 1
                if target is not None and n_dut >= target:
                    stop_ps = t
            pool = pools[k]
            for _ in range(pool.next_count()):
                delay, hit = pool.next_photon()
                if hit:
                    heapq.heappush(heap, (t + delay + link_ps, seq, 1 - k, int(Cause.BACKFLASH), cid, True))
                    seq += 1
        if target is None or finished or target == 0:
            break
        if stop_ps is not None and stop_ps + tail_ps <= seg_end:
            break
        segment += 1
        seg_start = seg_end
        if segment > 10_000:
            raise RuntimeError("detector pair did not reach the target click count")

    duration_ps = stop_ps + tail_ps if stop_ps is not None else seg_end
    clicks = _ClickSet()
    if out:
        det, tt, cause, parent, isclick = zip(*out)
        clicks.parts.append((np.array(det, np.int16), np.array(tt, np.int64), np.array(cause, np.int8),
                             np.array(parent, np.int64), np.array(isclick, bool)))
    return clicks.build(config, names, roles, lambda n: config.detectors[n], trial, duration_ps)
