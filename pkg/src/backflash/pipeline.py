"""simulate -> analyze -> keyrate, operating on directories of CSV files."""
from __future__ import annotations

import json
import math
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .analysis import (KeyRateInput, delays_from_pulses, detect_peaks, estimate_pb,
                       estimate_pb_sigma, histogram_of_delays, key_rate_detail, leak_ec_estimate,
                       pair_delays, worst_case_tag_fraction)
from .config import ConfigError, dump_config, load_config
from .devices import PS_PER_NS, Cause, per_electron_probability
from .eavesdropper import gate_pairs
from .engine import EventLog, ScenarioConfig, run_scenario
from .optics import CONJUGATE, extinction_ratio_from_scan
from .receiver import CHANNELS, reverse_survival

RUNS_KEY = "eve_runs"


# --------------------------------------------------------------------------- simulate

def _run_setting(args):
    config, trial = args
    return run_scenario(config, trial_index=trial)


def simulate(config: ScenarioConfig, out_dir, jobs: int = 1) -> dict:
    """Run a scenario and write its click log(s). Returns {label: EventLog}.

    With `eve_angles` set, one run per analyzer setting lands in its own
    `eve-<label>` subdirectory, each on an independent trial stream.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = dump_config(config)
    if not config.eve_angles:
        log = run_scenario(config)
        io.write_log_dir(log, out, doc, config.seed)
        return {"": log}
    if config.eve is None:
        raise ConfigError("eve_angles_deg", "needs an eve section")
    labels = list(config.eve_angles)
    work = [(replace(config, eve=config.eve.at_angle(config.eve_angles[lab])), k)
            for k, lab in enumerate(labels)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(_run_setting, work))
    else:
        logs = [_run_setting(w) for w in work]
    runs = {}
    for lab, (cfg, k), log in zip(labels, work, logs):
        sub = f"eve-{lab}"
        io.write_log_dir(log, out / sub, dump_config(replace(cfg, eve_angles={})), config.seed,
                         {"trial_index": k, "eve_setting": lab})
        runs[lab] = sub
    io.write_manifest(out / io.MANIFEST_NAME, doc, config.seed, {RUNS_KEY: runs})
    return dict(zip(labels, logs))


# --------------------------------------------------------------------------- analyze

ANALYSIS_DEFAULTS = {
    "bin_width_ps": 1000,
    "range_ns": None,
    "threshold_sigma": 5.0,
    "efficiency": None,
    "transmission": None,
    "coincidence_window_ns": None,
}


def _analysis_spec(spec: dict | None) -> dict:
    out = dict(ANALYSIS_DEFAULTS)
    for k, v in (spec or {}).items():
        if k not in out:
            raise ConfigError(f"analysis.{k}", "unknown key")
        out[k] = v
    return out


def _write_histogram(hist, path):
    edges = hist.edges
    io.write_table(path, ("bin_start_ps", "bin_end_ps", "count"),
                   zip(edges[:-1].tolist(), edges[1:].tolist(), hist.counts.tolist()))


def _peak_rows(peaks, click_delays, causes):
    rows = []
    for p in peaks:
        inside = (click_delays >= p.start) & (click_delays < p.end)
        c = causes[inside]
        if len(c):
            dominant = int(np.bincount(c, minlength=len(Cause)).argmax())
            purity = float((c == dominant).mean())
            label = Cause(dominant).label
        else:
            label, purity = "", float("nan")
        rows.append((p.start, p.end, p.area, p.significance, p.counts, label, purity))
    return rows


PEAK_HEADER = ("start_ps", "end_ps", "area", "significance", "counts", "dominant_cause", "purity")


def _pair_analysis(log: EventLog, cfg: ScenarioConfig, spec: dict, out: Path) -> dict:
    dut, spcm = cfg.detectors["DUT"], cfg.detectors["SPCM"]
    t_dut, t_spcm = log.times("DUT"), log.times("SPCM")
    lo, hi = spec["range_ns"] or (-150.0, 150.0)
    lo_ps, hi_ps = int(round(lo * PS_PER_NS)), int(round(hi * PS_PER_NS))
    delays = pair_delays(t_dut, t_spcm, lo_ps, hi_ps)
    hist = histogram_of_delays(delays, int(spec["bin_width_ps"]), lo_ps,
                               max(int(math.ceil((hi_ps - lo_ps) / spec["bin_width_ps"])), 1))
    _write_histogram(hist, out / "histogram.csv")
    offset = cfg.link.delay + spcm.electronic_delay - dut.electronic_delay
    w = spec["coincidence_window_ns"] or (offset - 5.0, offset + dut.profile.quench_time + 5.0)
    w_ps = (int(round(w[0] * PS_PER_NS)), int(round(w[1] * PS_PER_NS)))
    raw = int(((delays >= w_ps[0]) & (delays < w_ps[1])).sum())
    bg_rate = float(np.median(hist.counts)) / hist.bin_width if len(hist.counts) else 0.0
    background = bg_rate * (w_ps[1] - w_ps[0])
    coinc = raw - background
    if spec["efficiency"] is not None:
        eta = float(spec["efficiency"])
    elif cfg.link.filter is not None:
        eta = float(spcm.efficiency_curve(cfg.link.filter.center_wavelength))
    else:
        grid = np.linspace(*dut.spectrum.support, 4001)
        w = dut.spectrum.pdf(grid)
        eta = float(np.trapezoid(w * spcm.efficiency_curve(grid), grid) / np.trapezoid(w, grid))
    trans = float(spec["transmission"] if spec["transmission"] is not None else cfg.link.transmission)
    n = len(t_dut)
    pb = estimate_pb(coinc, eta, trans, n) if n else float("nan")
    sigma = estimate_pb_sigma(coinc, eta, trans, n) if n else float("nan")
    peaks = detect_peaks(hist, spec["threshold_sigma"]) if hist.counts.any() else []
    # ground truth per pair is the cause of its SPCM click
    pair_causes = _pair_causes(log, t_dut, lo_ps, hi_ps)
    io.write_table(out / "peaks.csv", PEAK_HEADER, _peak_rows(peaks, delays, pair_causes))
    est = {
        "dut_clicks": n,
        "spcm_clicks": len(t_spcm),
        "coincidences_raw": raw,
        "background": background,
        "coincidences": coinc,
        "window_start_ns": w[0],
        "window_end_ns": w[1],
        "efficiency": eta,
        "transmission": trans,
        "backflash_prob": pb,
        "backflash_prob_sigma": sigma,
        "per_electron_probability": (per_electron_probability(pb, dut.electrons_per_avalanche)
                                     if n and 0 < pb < 1 else float("nan")),
    }
    return est


def _pair_causes(log: EventLog, t_dut, lo_ps, hi_ps) -> np.ndarray:
    spcm = log.mask("SPCM")
    t_s, c_s = log.time_ps[spcm], log.cause[spcm]
    if len(t_dut) == 0 or len(t_s) == 0:
        return np.zeros(0, dtype=np.int64)
    first = np.searchsorted(t_s, t_dut + lo_ps, side="left")
    last = np.searchsorted(t_s, t_dut + hi_ps, side="left")
    n = last - first
    starts = np.repeat(first - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
    return c_s[starts + np.arange(int(n.sum()))].astype(np.int64)


def _receiver_analysis(log: EventLog, cfg: ScenarioConfig, spec: dict, out: Path) -> dict:
    est = {f"bob_clicks_{c}": len(log.times(c)) for c in log.bob_channels}
    if cfg.eve is None:
        return est
    eve_mask = log.mask("EVE")
    eve_t, eve_cause = log.time_ps[eve_mask], log.cause[eve_mask].astype(np.int64)
    est["eve_clicks"] = len(eve_t)
    bw = int(spec["bin_width_ps"])
    if cfg.eve.gate_reference == "alice_pulse":
        period = cfg.source.period_ps
        delays = delays_from_pulses(eve_t, period)
        lo, hi = spec["range_ns"] or (0.0, period / PS_PER_NS)
        lo_ps, hi_ps = int(round(lo * PS_PER_NS)), int(round(hi * PS_PER_NS))
        hist = histogram_of_delays(delays, bw, lo_ps, max(int(math.ceil((hi_ps - lo_ps) / bw)), 1))
        causes = eve_cause
    else:
        lo, hi = spec["range_ns"] or (0.0, 100.0)
        lo_ps, hi_ps = int(round(lo * PS_PER_NS)), int(round(hi * PS_PER_NS))
        bob_t = np.sort(np.concatenate([log.times(c) for c in log.bob_channels] or [np.zeros(0, np.int64)]))
        delays = pair_delays(bob_t, eve_t, lo_ps, hi_ps)
        hist = histogram_of_delays(delays, bw, lo_ps, max(int(math.ceil((hi_ps - lo_ps) / bw)), 1))
        causes = np.zeros(len(delays), dtype=np.int64)
        for c in log.bob_channels:
            b, e = gate_pairs(log.times(c), eve_t, cfg.eve.window_ps)
            est[f"coincidences_{c}"] = len(b)
        if len(bob_t):
            first = np.searchsorted(eve_t, bob_t + lo_ps, side="left")
            last = np.searchsorted(eve_t, bob_t + hi_ps, side="left")
            n = last - first
            starts = np.repeat(first - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
            causes = eve_cause[starts + np.arange(int(n.sum()))]
    _write_histogram(hist, out / "histogram.csv")
    peaks = detect_peaks(hist, spec["threshold_sigma"]) if hist.counts.any() else []
    io.write_table(out / "peaks.csv", PEAK_HEADER, _peak_rows(peaks, delays, causes))
    return est


RMATRIX_HEADER = ("bob_channel", "eve_setting", "coincidences", "bob_clicks", "ratio", "leakage",
                  "leakage_sigma")


def rmatrix_rows(logs: dict, window_ps) -> list[tuple]:
    """Rows of the R matrix; leakage is filled on cells where Eve's setting matches Bob's channel."""
    cells = {}
    for lab, log in logs.items():
        eve_t = log.times("EVE")
        for c in log.bob_channels:
            bt = log.times(c)
            cells[(c, lab)] = (len(gate_pairs(bt, eve_t, window_ps)[0]), len(bt))
    rows = []
    for (c, lab), (e, b) in cells.items():
        ratio = e / b if b else float("nan")
        leak = sig = ""
        conj = CONJUGATE.get(c)
        if lab == c and (c, conj) in cells:
            e2, b2 = cells[(c, conj)]
            if b and b2:
                leak = ratio - e2 / b2
                sig = math.sqrt(e / b ** 2 + e2 / b2 ** 2)
            else:
                leak = sig = float("nan")
        rows.append((c, lab, e, b, ratio, leak, sig))
    return rows


def analyze(in_dir, out_dir=None, spec: dict | None = None) -> dict:
    """Analyze a simulate output directory; writes tables and returns the estimates."""
    src = Path(in_dir)
    out = Path(out_dir) if out_dir else src
    out.mkdir(parents=True, exist_ok=True)
    spec = _analysis_spec(spec)
    manifest = io.read_manifest(src / io.MANIFEST_NAME)
    cfg = load_config(manifest["config"])
    est: dict = {}
    if RUNS_KEY in manifest:
        logs = {lab: io.read_log_dir(src / sub)[0] for lab, sub in manifest[RUNS_KEY].items()}
        rows = rmatrix_rows(logs, cfg.eve.window_ps)
        io.write_table(out / "rmatrix.csv", RMATRIX_HEADER, rows)
        for c, lab, e, b, ratio, leak, sig in rows:
            est[f"R_{c}{lab}"] = ratio
            if leak != "":
                est[f"leakage_{c}"] = leak
                est[f"leakage_sigma_{c}"] = sig
        first = next(iter(logs.values()), None)
        if first is not None:
            for k, v in _receiver_analysis(first, replace(cfg, eve=cfg.eve.at_angle(
                    cfg.eve_angles[next(iter(logs))])), spec, out).items():
                est.setdefault(k, v)
    else:
        log, _ = io.read_log_dir(src)
        if cfg.topology == "detector_pair":
            est.update(_pair_analysis(log, cfg, spec, out))
        else:
            est.update(_receiver_analysis(log, cfg, spec, out))
    bob = [cfg.detectors[c] for c in CHANNELS if c in cfg.detectors]
    if bob and cfg.topology == "receiver":
        est.setdefault("backflash_prob", float(np.mean([p.effective_backflash_prob for p in bob])))
    est.setdefault("reverse_transmission",
                   float(np.mean([cfg.receiver.reverse_transmission[c] for c in CHANNELS])))
    write_estimates(est, out / "estimates.csv")
    return est


def write_estimates(est: dict, path) -> None:
    io.write_table(path, ("quantity", "value"), est.items())


def read_estimates(path) -> dict:
    out = {}
    for row in io.read_table(path):
        try:
            out[row["quantity"]] = float(row["value"])
        except ValueError:
            out[row["quantity"]] = row["value"]
    return out


# --------------------------------------------------------------------------- key rate

KEYRATE_HEADER = ("variable", "value", "p_det", "qber", "p_e", "leak_ec", "correction", "rate", "abort_reason")
KEYRATE_DEFAULTS = {"p_det": 0.1, "qber": 0.05, "p_e": 0.0, "leak_ec": None, "f_ec": 1.2, "sweep": None}


def _keyrate_spec(spec: dict | None) -> dict:
    out = dict(KEYRATE_DEFAULTS)
    for k, v in (spec or {}).items():
        if k not in out:
            raise ConfigError(f"keyrate.{k}", "unknown key")
        out[k] = v
    return out


def _keyrate_row(variable, value, p_det, qber, p_e, leak_ec, f_ec):
    try:
        leak = leak_ec if leak_ec is not None else leak_ec_estimate(qber, p_det, f_ec)
        res = key_rate_detail(KeyRateInput(p_det, qber, leak, p_e))
    except ValueError as exc:
        raise ConfigError(f"keyrate.{variable}", str(exc)) from None
    return (variable, value, p_det, qber, p_e, leak, res.correction, res.rate, res.abort_reason)


def keyrate_table(spec: dict | None = None, estimates: dict | None = None,
                  reverse_transmission: float | None = None) -> list[tuple]:
    """Key-rate rows: a sweep (or a single point) plus an optional worst-case row.

    `estimates` may carry backflash_prob and reverse_transmission; their
    product is evaluated as the tagged fraction.
    """
    s = _keyrate_spec(spec)
    base = dict(p_det=s["p_det"], qber=s["qber"], p_e=s["p_e"], leak_ec=s["leak_ec"], f_ec=s["f_ec"])
    rows = []
    sweep = s["sweep"]
    if sweep:
        var = sweep.get("variable", "p_e")
        if var not in ("p_e", "qber", "p_det"):
            raise ConfigError("keyrate.sweep.variable", f"cannot sweep {var!r}")
        points = int(sweep.get("points", 1000))
        if points < 1:
            raise ConfigError("keyrate.sweep.points", "must be at least 1")
        start = float(sweep.get("start", 0.0))
        stop = float(sweep.get("stop", s["p_det"] if var == "p_e" else 0.5))
        for x in np.linspace(start, stop, points):
            kw = dict(base)
            kw[var] = float(x)
            rows.append(_keyrate_row(var, float(x), **kw))
    else:
        rows.append(_keyrate_row("p_e", base["p_e"], **base))
    if estimates is not None:
        pb = estimates.get("backflash_prob")
        tb = reverse_transmission if reverse_transmission is not None else estimates.get("reverse_transmission")
        if pb is None or tb is None or not (isinstance(pb, float) and math.isfinite(pb)):
            raise ConfigError("estimates", "needs backflash_prob and reverse_transmission")
        pe = worst_case_tag_fraction(float(pb), float(tb))
        kw = dict(base)
        kw["p_e"] = pe
        rows.append(_keyrate_row("worst_case_tag_fraction", pe, **kw))
    return rows


def write_keyrate(rows, path) -> None:
    io.write_table(path, KEYRATE_HEADER, rows)


# --------------------------------------------------------------------------- extinction scan

SCAN_HEADER = ("channel", "angle_deg", "power_w")


def reverse_power_scan(config: ScenarioConfig, angles, input_power_w: float, wavelength_nm: float):
    """Power behind an ideal rotating polarizer for light launched back into each channel.

    The launch polarization maximizes throughput; the receiver's output
    extinction sets the depth of the modulation.
    """
    rx = config.receiver
    rows, ratios, tb = [], {}, {}
    th = np.radians(np.asarray(angles, dtype=float))
    for c in CHANNELS:
        ang = math.radians(rx.channel_axes[c])
        through = float(reverse_survival(np.array([complex(math.cos(ang))]), np.array([complex(math.sin(ang))]),
                                         np.array([wavelength_nm]), c, rx)[0])
        out_ratio = rx.output_ratio(c)
        leak = 0.0 if math.isinf(out_ratio) else 1 / (out_ratio + 1)
        powers = input_power_w * through * ((1 - leak) * np.cos(th - ang) ** 2 + leak * np.sin(th - ang) ** 2)
        rows += [(c, float(a), float(p)) for a, p in zip(angles, powers)]
        ratios[c] = extinction_ratio_from_scan(list(zip(map(float, angles), powers.tolist())))
        tb[c] = through
    return rows, ratios, tb


# --------------------------------------------------------------------------- presets

def preset_names() -> list[str]:
    files = resources.files("backflash").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("backflash").joinpath("presets").joinpath(f"{name}.json")
    if not path.is_file():
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(preset_names())}")
    return json.loads(path.read_text())


def run_preset(name: str, out_dir, seed: int | None = None, jobs: int = 1) -> dict:
    """Run a preset end to end; returns its estimates."""
    doc = load_preset(name)
    kind = doc.get("kind", "scenario")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "keyrate":
        rows = keyrate_table(doc.get("keyrate"), doc.get("estimates"))
        write_keyrate(rows, out / "keyrate.csv")
        io.write_manifest(out / io.MANIFEST_NAME, doc, seed or 0, {"preset": name})
        return {"points": len(rows)}
    cfg = load_config(doc["config"])
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if kind == "extinction-scan":
        scan = doc.get("scan", {})
        angles = np.arange(0.0, 360.0, float(scan.get("step_deg", 1.0)))
        rows, ratios, tb = reverse_power_scan(cfg, angles, float(scan.get("input_power_w", 40e-6)),
                                              float(scan.get("wavelength_nm", 808.0)))
        io.write_table(out / "scan.csv", SCAN_HEADER, rows)
        est = {}
        for c in CHANNELS:
            r = ratios[c]
            est[f"extinction_ratio_{c}"] = r.ratio
            est[f"max_angle_{c}"] = r.max_angle
            est[f"reverse_transmission_{c}"] = tb[c]
        est["reverse_transmission"] = float(np.mean(list(tb.values())))
        write_estimates(est, out / "estimates.csv")
        io.write_manifest(out / io.MANIFEST_NAME, dump_config(cfg), cfg.seed, {"preset": name})
        return est
    simulate(cfg, out, jobs=jobs)
    est = analyze(out, spec=doc.get("analysis"))
    if "keyrate" in doc:
        write_keyrate(keyrate_table(doc["keyrate"], est), out / "keyrate.csv")
    return est
