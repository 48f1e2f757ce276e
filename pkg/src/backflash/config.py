"""Scenario files: JSON documents with units in the key names.

`load_config` turns a parsed document into a validated `ScenarioConfig`;
`dump_config` produces the fully-resolved document echoed into run
manifests, so ``load_config(dump_config(cfg)) == cfg``. See
docs/config-schema.md for every field.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

from .devices import ApdParams, BackflashProfile, EfficiencyCurve, SpectralDensity
from .eavesdropper import EveSetup
from .engine import LinkConfig, ScenarioConfig, SourceConfig
from .optics import FilterSpec, PbsSpec, WaveplateSpec
from .receiver import CHANNELS, ReceiverModel, ReflectionTap


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class _Section:
    """Reads keys from one mapping, remembering which were consumed."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self.data, self.path, self.used = data, path, set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def has(self, name: str) -> bool:
        return name in self.data

    def raw(self, name: str, default=None):
        self.used.add(name)
        return self.data.get(name, default)

    def number(self, name: str, default=None, *, integer=False, allow_inf=False, allow_none=False):
        self.used.add(name)
        if name not in self.data:
            return default
        v = self.data[name]
        if v is None and allow_none:
            return None
        if allow_inf and (v is None or v == "inf"):
            return math.inf
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(self.key(name), f"expected a number, got {v!r}")
        if integer:
            if float(v) != int(v):
                raise ConfigError(self.key(name), f"expected an integer, got {v!r}")
            return int(v)
        return float(v)

    def text(self, name: str, default=None, choices=None):
        self.used.add(name)
        v = self.data.get(name, default)
        if not isinstance(v, str):
            raise ConfigError(self.key(name), f"expected a string, got {v!r}")
        if choices and v not in choices:
            raise ConfigError(self.key(name), f"expected one of {sorted(choices)}, got {v!r}")
        return v

    def section(self, name: str):
        self.used.add(name)
        v = self.data.get(name)
        return None if v is None else _Section(v, self.key(name))

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(self.key(extra[0]), "unknown key")


def _guard(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None


def _pairs(sec: _Section, name: str):
    v = sec.raw(name)
    if (not isinstance(v, list) or not v
            or not all(isinstance(p, list) and len(p) == 2 and all(isinstance(x, (int, float)) for x in p)
                       for p in v)):
        raise ConfigError(sec.key(name), "expected a non-empty list of [wavelength_nm, value] pairs")
    return tuple((float(a), float(b)) for a, b in v)


def _channel_map(sec: _Section, name: str, default: dict, *, allow_inf=False) -> dict:
    sub = sec.section(name)
    out = dict(default)
    if sub is None:
        return out
    for k in list(sub.data):
        if k not in out and k not in CHANNELS + ("HV", "DA"):
            raise ConfigError(sub.key(k), "unknown channel")
        out[k] = sub.number(k, allow_inf=allow_inf)
    sub.finish()
    return out


def _filter(sec: _Section | None):
    if sec is None:
        return None
    f = _guard(sec.path, FilterSpec,
               center_wavelength=sec.number("center_nm", 808.0),
               bandwidth_fwhm=sec.number("bandwidth_nm", 3.0),
               peak_transmission=sec.number("peak_transmission", 1.0),
               profile=sec.text("profile", "tophat", {"tophat", "gaussian"}))
    sec.finish()
    return f


def _apd(sec: _Section | None, base: ApdParams) -> ApdParams:
    if sec is None:
        return base
    kw = {}
    if sec.has("efficiency"):
        v = sec.data["efficiency"]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            kw["efficiency_curve"] = _guard(sec.key("efficiency"), EfficiencyCurve.constant, sec.number("efficiency"))
        else:
            kw["efficiency_curve"] = _guard(sec.key("efficiency"), EfficiencyCurve, _pairs(sec, "efficiency"))
    for key, attr in (("dark_rate_hz", "dark_count_rate"), ("dead_time_ns", "dead_time"),
                      ("backflash_prob", "backflash_prob"), ("electrons_per_avalanche", "electrons_per_avalanche"),
                      ("jitter_ps", "jitter_ps"), ("electronic_delay_ns", "electronic_delay")):
        if sec.has(key):
            kw[attr] = sec.number(key)
    if sec.has("emission_statistics"):
        kw["emission_statistics"] = sec.text("emission_statistics", choices={"poisson", "single"})
    if sec.has("kind"):
        kw["kind"] = sec.text("kind", choices={"apd", "pmt"})
    prof = sec.section("profile")
    if prof is not None:
        p = base.profile
        kw["profile"] = _guard(prof.path, BackflashProfile,
                               prof.number("rise_ns", p.rise_time_constant),
                               prof.number("decay_ns", p.decay_time_constant),
                               prof.number("quench_ns", p.quench_time),
                               prof.number("residual", p.residual_after_quench))
        prof.finish()
    if sec.has("spectrum"):
        kw["spectrum"] = _guard(sec.key("spectrum"), SpectralDensity, _pairs(sec, "spectrum"))
    sec.finish()
    if kw.get("kind") == "pmt":
        kw["backflash_prob"] = 0.0
    from dataclasses import replace
    return _guard(sec.path, replace, base, **kw)


def _receiver(sec: _Section | None) -> ReceiverModel:
    d = ReceiverModel()
    if sec is None:
        return d
    er = _channel_map(sec, "extinction_ratio", {"HV": math.inf, "DA": math.inf}, allow_inf=True)
    axes = _channel_map(sec, "channel_axes_deg", d.channel_axes)
    pbs = {"HV": _guard(sec.key("extinction_ratio.HV"), PbsSpec, axes["H"], er["HV"]),
           "DA": _guard(sec.key("extinction_ratio.DA"), PbsSpec, axes["D"], er["DA"])}
    rev_er = _channel_map(sec, "reverse_extinction", {}, allow_inf=True)
    taps = []
    for k, t in enumerate(sec.raw("reflection_taps", []) or []):
        ts = _Section(t, sec.key(f"reflection_taps[{k}]"))
        taps.append(_guard(ts.path, ReflectionTap, ts.text("name", f"tap{k}"), ts.number("delay_ns", 0.0),
                           ts.number("reflectance", 0.0), ts.raw("channel")))
        ts.finish()
    model = _guard(sec.path or "receiver", ReceiverModel,
                   basis_bs_ratio=sec.number("basis_bs_ratio", d.basis_bs_ratio),
                   channel_pbs=pbs, channel_axes=axes,
                   forward_transmission=sec.number("forward_transmission", d.forward_transmission),
                   reverse_transmission=_channel_map(sec, "reverse_transmission", d.reverse_transmission),
                   reverse_extinction=rev_er,
                   entrance_filter=_filter(sec.section("entrance_filter")),
                   channel_delay=_channel_map(sec, "channel_delay_ns", d.channel_delay),
                   reflection_taps=tuple(taps))
    sec.finish()
    return model


def _eve(sec: _Section | None) -> EveSetup | None:
    if sec is None:
        return None
    d = EveSetup()
    dist = sec.section("distortion")
    wp = WaveplateSpec()
    if dist is not None:
        wp = WaveplateSpec(dist.number("retardance_rad", wp.retardance), dist.number("fast_axis_deg", wp.fast_axis_angle))
        dist.finish()
    window = sec.raw("gate_window_ns", list(d.gate_window))
    if not (isinstance(window, list) and len(window) == 2):
        raise ConfigError(sec.key("gate_window_ns"), "expected [start, end]")
    pbs = _guard(sec.key("extinction_ratio"), PbsSpec, sec.number("analysis_angle_deg", 0.0),
                 sec.number("extinction_ratio", math.inf, allow_inf=True))
    setup = _guard(sec.path, EveSetup,
                   tap_to_eve=sec.number("tap_to_eve", d.tap_to_eve),
                   measurement_throughput=sec.number("measurement_throughput", d.measurement_throughput),
                   analysis_pbs=pbs, distortion=wp,
                   spcm=_apd(sec.section("spcm"), d.spcm),
                   gate_window=tuple(window),
                   gate_reference=sec.text("gate_reference", d.gate_reference, {"bob_click", "alice_pulse"}),
                   path_delay=sec.number("path_delay_ns", d.path_delay))
    sec.finish()
    return setup


def load_config(doc: dict) -> ScenarioConfig:
    if isinstance(doc, dict) and "config" in doc and "manifest_version" in doc:
        doc = doc["config"]
    root = _Section(doc, "")
    topology = root.text("topology", "receiver", {"receiver", "detector_pair"})
    src_sec = root.section("source")
    s = SourceConfig()
    if src_sec is not None:
        s = _guard("source", SourceConfig,
                   period=src_sec.number("period_ns", s.period),
                   width=src_sec.number("width_ns", s.width),
                   count=src_sec.number("count", s.count, integer=True),
                   mean_photons=src_sec.number("mean_photons", s.mean_photons),
                   policy=src_sec.text("policy", s.policy, {"random", "fixed"}),
                   polarization=str(src_sec.raw("polarization", s.polarization)),
                   wavelength=src_sec.number("wavelength_nm", s.wavelength))
        src_sec.finish()
    default_apd = _apd(root.section("detector_defaults"), ApdParams())
    det_sec = root.section("detectors")
    names = CHANNELS if topology == "receiver" else ("DUT", "SPCM")
    detectors = {}
    if det_sec is None:
        detectors = {n: default_apd for n in names}
    else:
        for n in list(det_sec.data):
            if n not in names:
                raise ConfigError(det_sec.key(n), f"unknown detector for {topology} topology")
            sub = det_sec.data[n]
            det_sec.used.add(n)
            detectors[n] = _apd(_Section(sub, det_sec.key(n)), default_apd) if sub is not None else default_apd
    link_sec = root.section("link")
    link = LinkConfig()
    if link_sec is not None:
        link = _guard("link", LinkConfig, link_sec.number("transmission", link.transmission),
                      link_sec.number("delay_ns", link.delay), _filter(link_sec.section("filter")))
        link_sec.finish()
    eve_angles = {}
    ang_sec = root.section("eve_angles_deg")
    if ang_sec is not None:
        eve_angles = {k: ang_sec.number(k) for k in list(ang_sec.data)}
    cfg = _guard("<root>", ScenarioConfig,
                 topology=topology, source=s,
                 receiver=_receiver(root.section("receiver")),
                 detectors=detectors,
                 eve=_eve(root.section("eve")),
                 link=link,
                 seed=root.number("seed", 1, integer=True),
                 target_clicks=root.number("target_clicks", None, integer=True, allow_none=True),
                 duration=root.number("duration_s", None, allow_none=True),
                 eve_angles=eve_angles)
    root.finish()
    return cfg


def read_config(path) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return load_config(doc)


# --------------------------------------------------------------------------- dumping

def _num(x: float):
    return "inf" if math.isinf(x) else x


def _dump_filter(f: FilterSpec | None):
    if f is None:
        return None
    return {"center_nm": f.center_wavelength, "bandwidth_nm": f.bandwidth_fwhm,
            "peak_transmission": f.peak_transmission, "profile": f.profile}


def _dump_apd(p: ApdParams) -> dict:
    return {
        "kind": p.kind,
        "efficiency": [list(x) for x in p.efficiency_curve.points],
        "dark_rate_hz": p.dark_count_rate,
        "dead_time_ns": p.dead_time,
        "backflash_prob": p.backflash_prob,
        "electrons_per_avalanche": p.electrons_per_avalanche,
        "emission_statistics": p.emission_statistics,
        "jitter_ps": p.jitter_ps,
        "electronic_delay_ns": p.electronic_delay,
        "profile": {"rise_ns": p.profile.rise_time_constant, "decay_ns": p.profile.decay_time_constant,
                    "quench_ns": p.profile.quench_time, "residual": p.profile.residual_after_quench},
        "spectrum": [list(x) for x in p.spectrum.points],
    }


def dump_config(cfg: ScenarioConfig) -> dict:
    rx = cfg.receiver
    doc = {
        "topology": cfg.topology,
        "seed": cfg.seed,
        "target_clicks": cfg.target_clicks,
        "duration_s": cfg.duration,
        "source": {"period_ns": cfg.source.period, "width_ns": cfg.source.width, "count": cfg.source.count,
                   "mean_photons": cfg.source.mean_photons, "policy": cfg.source.policy,
                   "polarization": cfg.source.polarization, "wavelength_nm": cfg.source.wavelength},
        "receiver": {
            "basis_bs_ratio": rx.basis_bs_ratio,
            "extinction_ratio": {b: _num(p.extinction_ratio) for b, p in rx.channel_pbs.items()},
            "channel_axes_deg": dict(rx.channel_axes),
            "forward_transmission": rx.forward_transmission,
            "reverse_transmission": dict(rx.reverse_transmission),
            "reverse_extinction": {c: _num(v) for c, v in rx.reverse_extinction.items()},
            "entrance_filter": _dump_filter(rx.entrance_filter),
            "channel_delay_ns": dict(rx.channel_delay),
            "reflection_taps": [{"name": t.name, "delay_ns": t.delay, "reflectance": t.reflectance,
                                 "channel": t.channel} for t in rx.reflection_taps],
        },
        "detectors": {n: _dump_apd(p) for n, p in cfg.detectors.items()},
        "link": {"transmission": cfg.link.transmission, "delay_ns": cfg.link.delay,
                 "filter": _dump_filter(cfg.link.filter)},
        "eve": None,
        "eve_angles_deg": dict(cfg.eve_angles),
    }
    if cfg.eve is not None:
        e = cfg.eve
        doc["eve"] = {
            "tap_to_eve": e.tap_to_eve, "measurement_throughput": e.measurement_throughput,
            "analysis_angle_deg": e.analysis_pbs.axis_angle,
            "extinction_ratio": _num(e.analysis_pbs.extinction_ratio),
            "distortion": {"retardance_rad": e.distortion.retardance,
                           "fast_axis_deg": e.distortion.fast_axis_angle},
            "gate_window_ns": list(e.gate_window), "gate_reference": e.gate_reference,
            "path_delay_ns": e.path_delay, "spcm": _dump_apd(e.spcm),
        }
    if doc["receiver"]["entrance_filter"] is None:
        del doc["receiver"]["entrance_filter"]
    if doc["link"]["filter"] is None:
        del doc["link"]["filter"]
    return doc
