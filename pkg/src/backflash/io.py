"""On-disk formats: click logs, genealogy, analysis tables and run manifests.

All CSV files are comma-separated with a header row and LF line endings.
Times are integer picoseconds. See docs/file-formats.md.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .devices import Cause
from .engine import EventLog

MANIFEST_NAME = "run-manifest.json"
MANIFEST_VERSION = 1
CLICK_HEADER = ("channel", "time_ps", "cause", "parent_id")
GENEALOGY_HEADER = ("click_id", "channel", "cause", "parent_kind", "parent_id", "true_time_ps")

ROLE_OF = {"H": "bob", "V": "bob", "D": "bob", "A": "bob", "EVE": "eve", "DUT": "dut", "SPCM": "spcm"}
_LABELS = [c.label for c in Cause]


def package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    _write_rows(Path(path), header, ([_fmt(v) for v in r] for r in rows))


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _frame(log: EventLog) -> pd.DataFrame:
    names = np.asarray(log.detectors, dtype=object)[log.channel] if len(log) else np.zeros(0, dtype=object)
    return pd.DataFrame({"channel": names, "cause": np.asarray(_LABELS, dtype=object)[log.cause]})


def write_clicks(log: EventLog, path) -> None:
    f = _frame(log)
    f.insert(1, "time_ps", log.time_ps)
    f["parent_id"] = log.parent_id
    f.to_csv(path, index=False, lineterminator="\n")


def write_genealogy(log: EventLog, path) -> None:
    f = _frame(log)
    f.insert(0, "click_id", np.arange(len(log), dtype=np.int64))
    f["parent_kind"] = np.where(log.parent_id < 0, "none",
                                np.where(log.cause == Cause.BACKFLASH, "click", "pulse"))
    f["parent_id"] = log.parent_id
    f["true_time_ps"] = log.true_time_ps
    f[list(GENEALOGY_HEADER)].to_csv(path, index=False, lineterminator="\n")


def _read_frame(path, header: Sequence[str], int_cols: Sequence[str]) -> pd.DataFrame:
    dtypes = {c: (np.int64 if c in int_cols else str) for c in header}
    try:
        f = pd.read_csv(path, dtype=dtypes, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: empty file, expected header {','.join(header)}") from None
    except (ValueError, TypeError) as exc:
        raise ValueError(f"{path}: malformed rows ({exc})") from None
    if tuple(f.columns) != tuple(header):
        raise ValueError(f"{path}: header must be {','.join(header)}")
    return f


def read_clicks(path, detectors: Sequence[str] | None = None, *, genealogy=None,
                period_ps: int = 0, pulse_count: int = 0, duration_ps: int = 0) -> EventLog:
    """Load clicks.csv back into an EventLog (true times from genealogy.csv if given)."""
    f = _read_frame(path, CLICK_HEADER, ("time_ps", "parent_id"))
    names = list(detectors or [])
    names += [n for n in pd.unique(f["channel"]).tolist() if n not in names]
    channel = pd.Categorical(f["channel"], categories=names).codes.astype(np.int16)
    cause = pd.Categorical(f["cause"], categories=_LABELS).codes.astype(np.int8)
    if np.any(cause < 0):
        bad = f["cause"][cause < 0].iloc[0]
        raise ValueError(f"{path}: unknown click cause {bad!r}")
    time_ps = f["time_ps"].to_numpy()
    parent = f["parent_id"].to_numpy()
    true_t = time_ps.copy()
    if genealogy is not None and Path(genealogy).exists():
        g = _read_frame(genealogy, GENEALOGY_HEADER, ("click_id", "parent_id", "true_time_ps"))
        if len(g) == len(f):
            true_t = g["true_time_ps"].to_numpy()
    if len(time_ps) > 1 and np.any(np.diff(time_ps) < 0):
        raise ValueError(f"{path}: clicks are not time-ordered")
    roles = {n: ROLE_OF.get(n, "other") for n in names}
    return EventLog(tuple(names), roles, channel, time_ps, cause, parent, true_t,
                    period_ps, pulse_count, duration_ps)


def write_manifest(path, config_doc: dict, seed: int, extra: dict | None = None) -> None:
    doc = {"manifest_version": MANIFEST_VERSION, "package_version": package_version(),
           "seed": seed, "config": config_doc}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def write_log_dir(log: EventLog, out_dir, config_doc: dict, seed: int, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_clicks(log, out / "clicks.csv")
    write_genealogy(log, out / "genealogy.csv")
    info = {"detectors": list(log.detectors), "pulse_period_ps": log.pulse_period_ps,
            "pulse_count": log.pulse_count, "duration_ps": log.duration_ps}
    info.update(extra or {})
    write_manifest(out / MANIFEST_NAME, config_doc, seed, info)


def read_log_dir(in_dir) -> tuple[EventLog, dict]:
    d = Path(in_dir)
    manifest = read_manifest(d / MANIFEST_NAME)
    log = read_clicks(d / "clicks.csv", manifest.get("detectors"), genealogy=d / "genealogy.csv",
                      period_ps=manifest.get("pulse_period_ps", 0),
                      pulse_count=manifest.get("pulse_count", 0),
                      duration_ps=manifest.get("duration_ps", 0))
    return log, manifest
