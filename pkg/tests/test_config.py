import json
import math

import pytest

from backflash.config import ConfigError, dump_config, load_config, read_config
from backflash.pipeline import load_preset, preset_names


def test_defaults():
    cfg = load_config({})
    assert cfg.topology == "receiver"
    assert set(cfg.detectors) == {"H", "V", "D", "A"}


@pytest.mark.parametrize("name", [n for n in preset_names() if "config" in load_preset(n)])
def test_preset_round_trip(name):
    cfg = load_config(load_preset(name)["config"])
    doc = dump_config(cfg)
    assert load_config(json.loads(json.dumps(doc))) == cfg


def test_detector_defaults_merge():
    cfg = load_config({"detector_defaults": {"dark_rate_hz": 7},
                       "detectors": {"H": {"backflash_prob": 0.2}}})
    assert cfg.detectors["H"].dark_count_rate == 7
    assert cfg.detectors["H"].backflash_prob == 0.2
    # listing detectors selects which ones are fitted
    assert set(cfg.detectors) == {"H"}


def test_infinite_extinction():
    cfg = load_config({"receiver": {"extinction_ratio": {"HV": "inf", "DA": None}}})
    assert all(math.isinf(p.extinction_ratio) for p in cfg.receiver.channel_pbs.values())


def test_manifest_accepted():
    doc = {"manifest_version": 1, "config": {"seed": 42}}
    assert load_config(doc).seed == 42


@pytest.mark.parametrize("doc, key", [
    ({"source": {"period_ns": "x"}}, "source.period_ns"),
    ({"source": {"period_nss": 1}}, "source.period_nss"),
    ({"bogus": 1}, "bogus"),
    ({"topology": "ring"}, "topology"),
    ({"detectors": {"Q": {}}}, "detectors.Q"),
    ({"detectors": {"H": {"dark_rate_hz": -1}}}, "detectors.H"),
    ({"source": {"period_ns": 1, "width_ns": 3}}, "source"),
    ({"link": {"delay_ns": 0}}, "link"),
    ({"seed": 1.5}, "seed"),
    ({"detectors": {"H": {"efficiency": [[800]]}}}, "detectors.H.efficiency"),
    ([], "<root>"),
])
def test_errors_name_the_field(doc, key):
    with pytest.raises(ConfigError) as info:
        load_config(doc)
    assert info.value.key.startswith(key)
    assert str(info.value).startswith(key)


def test_read_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        read_config(p)
