import numpy as np
import pytest

from backflash import io
from backflash.devices import Cause
from backflash.engine import EventLog, ScenarioConfig, SourceConfig, run_scenario


def small_log():
    return run_scenario(ScenarioConfig(source=SourceConfig(count=20_000, mean_photons=0.5), seed=2))


def test_click_round_trip(tmp_path):
    log = small_log()
    io.write_log_dir(log, tmp_path, {"seed": 2}, 2)
    back, manifest = io.read_log_dir(tmp_path)
    assert back.detectors == log.detectors
    for f in ("channel", "time_ps", "cause", "parent_id", "true_time_ps"):
        assert np.array_equal(getattr(back, f), getattr(log, f)), f
    assert manifest["seed"] == 2 and manifest["pulse_count"] == 20_000


def test_headers_and_line_endings(tmp_path):
    log = small_log()
    io.write_clicks(log, tmp_path / "c.csv")
    io.write_genealogy(log, tmp_path / "g.csv")
    raw = (tmp_path / "c.csv").read_bytes()
    assert raw.startswith(b"channel,time_ps,cause,parent_id\n") and b"\r" not in raw
    first = (tmp_path / "g.csv").read_text().splitlines()[0]
    assert first == ",".join(io.GENEALOGY_HEADER)


def test_genealogy_parent_kinds(tmp_path):
    log = small_log()
    io.write_genealogy(log, tmp_path / "g.csv")
    rows = io.read_table(tmp_path / "g.csv")
    for r in rows[:2000]:
        cause = Cause.from_label(r["cause"])
        if cause == Cause.BACKFLASH:
            assert r["parent_kind"] == "click"
        elif r["parent_id"] == "-1":
            assert r["parent_kind"] == "none"


def test_empty_log(tmp_path):
    log = run_scenario(ScenarioConfig(source=SourceConfig(count=0)))
    io.write_log_dir(log, tmp_path, {}, 1)
    assert (tmp_path / "clicks.csv").read_text() == "channel,time_ps,cause,parent_id\n"
    back, _ = io.read_log_dir(tmp_path)
    assert len(back) == 0


@pytest.mark.parametrize("body, msg", [
    ("a,b\n1,2\n", "header"),
    ("channel,time_ps,cause,parent_id\nH,xx,signal,-1\n", "malformed"),
    ("channel,time_ps,cause,parent_id\nH,5,gremlin,-1\n", "cause"),
    ("channel,time_ps,cause,parent_id\nH,5,dark,-1\nH,4,dark,-1\n", "time-ordered"),
    ("", "empty"),
])
def test_bad_click_files(tmp_path, body, msg):
    p = tmp_path / "clicks.csv"
    p.write_text(body)
    with pytest.raises(ValueError, match=msg):
        io.read_clicks(p)


def test_table_floats_round_trip(tmp_path):
    io.write_table(tmp_path / "t.csv", ("x",), [(0.1 + 0.2,)])
    assert float(io.read_table(tmp_path / "t.csv")[0]["x"]) == 0.1 + 0.2
