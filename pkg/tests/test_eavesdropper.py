import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from backflash.analysis import fit_malus
from backflash.devices import ApdParams, Cause, ClickRecord, DetectorState, EfficiencyCurve, PhotonEvent
from backflash.eavesdropper import (EveSetup, analyzer_probability, angle_scan, eve_intercept, gate_coincidences,
                                    gate_pairs)
from backflash.engine import ScenarioConfig, SourceConfig
from backflash.optics import JonesVector, PbsSpec, WaveplateSpec
from backflash.receiver import CHANNELS, ReceiverModel

import oracles


def perfect_spcm(eff=1.0):
    return ApdParams(efficiency_curve=EfficiencyCurve.constant(eff), dark_count_rate=0, dead_time=0)


class TestIntercept:
    def test_click_probability_is_product_of_factors(self):
        setup = EveSetup(tap_to_eve=0.9, measurement_throughput=0.6, analysis_pbs=PbsSpec(0, 167))
        p = analyzer_probability(np.array([1 + 0j]), np.array([0j]), setup)[0]
        assert p == pytest.approx(0.9 * 0.6 * 167 / 168)

    def test_crossed_photon_leaks_by_extinction(self):
        setup = EveSetup(tap_to_eve=1, measurement_throughput=1, analysis_pbs=PbsSpec(0, 167))
        assert analyzer_probability(np.array([0j]), np.array([1 + 0j]), setup)[0] == pytest.approx(1 / 168)

    def test_monte_carlo_rate(self):
        setup = EveSetup(tap_to_eve=0.9, measurement_throughput=0.6, spcm=perfect_spcm(0.6))
        rng = np.random.default_rng(0)
        n = 40000
        clicks = sum(eve_intercept(PhotonEvent(k * 10**6, 808.0, JonesVector.linear(0)), setup, rng) is not None
                     for k in range(n))
        p = 0.9 * 0.6 * 0.6
        assert abs(clicks - n * p) < 3 * oracles.binomial_sigma(n, p)

    def test_intercept_adds_path_delay(self):
        setup = EveSetup(tap_to_eve=1, measurement_throughput=1, spcm=perfect_spcm(), path_delay=4)
        click = eve_intercept(PhotonEvent(1000, 808.0, JonesVector.linear(0), Cause.BACKFLASH, 3), setup,
                              np.random.default_rng(0), DetectorState("EVE"))
        assert click.time_ps == 5000 and click.cause == Cause.BACKFLASH and click.parent_id == 3

    def test_spcm_backflash_forced_off(self):
        assert EveSetup(spcm=ApdParams(backflash_prob=0.3)).spcm.backflash_prob == 0

    @pytest.mark.parametrize("kw", [dict(tap_to_eve=1.2), dict(gate_window=(30, 25)), dict(gate_reference="x"),
                                    dict(measurement_throughput=-0.1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EveSetup(**kw)


class TestGate:
    W = (25_000, 30_000)

    def test_empty(self):
        assert gate_coincidences([ClickRecord("H", 0, Cause.SIGNAL, 0)], [], EveSetup()) == []

    def test_single_pair(self):
        b = ClickRecord("H", 0, Cause.SIGNAL, 0)
        e = ClickRecord("EVE", 27_000, Cause.BACKFLASH, 0)
        assert gate_coincidences([b], [e], EveSetup(gate_window=(25, 30))) == [(b, e)]

    def test_half_open_window(self):
        assert len(gate_pairs([0], [25_000], self.W)[0]) == 1
        assert len(gate_pairs([0], [30_000], self.W)[0]) == 0

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            gate_pairs([5, 1], [10], self.W)
        with pytest.raises(ValueError):
            gate_pairs([1], [10, 5], self.W)

    def test_tie_goes_to_earlier_bob(self):
        # symmetric window: Bob clicks 1 ns either side of the Eve click
        b, e = gate_pairs([9_000, 9_000, 11_000], [10_000], (-2_000, 2_000))
        assert b.tolist() == [0] and e.tolist() == [0]

    def test_matches_brute_force_on_1000_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            nb, ne = rng.integers(0, 25, 2)
            bob = np.sort(rng.integers(0, 200, nb)) * 500
            eve = np.sort(rng.integers(0, 200, ne)) * 500
            start = int(rng.integers(-20, 20)) * 500
            end = start + int(rng.integers(1, 30)) * 500
            b, e = gate_pairs(bob, eve, (start, end))
            assert list(zip(b.tolist(), e.tolist())) == oracles.brute_force_pairs(bob.tolist(), eve.tolist(), start, end)

    @given(st.lists(st.integers(0, 10**6), max_size=40), st.lists(st.integers(0, 10**6), max_size=40),
           st.integers(-50_000, 50_000), st.integers(1, 100_000))
    def test_soundness(self, bob, eve, start, width):
        bob, eve = sorted(bob), sorted(eve)
        b, e = gate_pairs(bob, eve, (start, start + width))
        assert len(set(e.tolist())) == len(e)
        for i, j in zip(b.tolist(), e.tolist()):
            assert start <= eve[j] - bob[i] < start + width


def boosted_config(**eve_kw):
    """Single-channel H scenario with generous backflash so scans are cheap."""
    det = ApdParams(efficiency_curve=EfficiencyCurve.constant(1.0), dark_count_rate=0, dead_time=50,
                    backflash_prob=0.5)
    eve = EveSetup(tap_to_eve=1.0, measurement_throughput=1.0, spcm=perfect_spcm(), gate_window=(0, 60),
                   path_delay=1.0, **eve_kw)
    return ScenarioConfig(source=SourceConfig(count=50_000, mean_photons=1.0, policy="fixed", polarization="H"),
                          receiver=ReceiverModel(reverse_transmission={c: 1.0 for c in CHANNELS}),
                          detectors={"H": det}, eve=eve, seed=3)


class TestAngleScan:
    def test_argmax_at_h_axis(self):
        scan = angle_scan(boosted_config(), [0.0, 90.0])
        assert scan.argmax == 0.0 and scan.argmin == 90.0

    def test_ideal_extinction_ratio_recovered(self):
        er = 8.0
        cfg = boosted_config(analysis_pbs=PbsSpec(0, er))
        scan = angle_scan(cfg, [0.0, 90.0])
        hi, lo = scan.coincidences
        ratio = scan.max_min_ratio
        sigma = ratio * math.sqrt(1 / hi + 1 / lo)
        assert abs(ratio - er) < 3 * sigma

    def test_malus_fit_over_one_degree_steps(self):
        angles = np.arange(0.0, 180.0, 1.0)
        cfg = replace(boosted_config(), source=SourceConfig(count=20_000, mean_photons=1.0, policy="fixed"))
        scan = angle_scan(cfg, angles)
        offset, amp, phase, r2 = fit_malus(scan.angles, scan.rates)
        assert r2 > 0.99
        assert min(phase, 180 - phase) < 2.0

    def test_parallel_matches_serial(self):
        cfg = replace(boosted_config(), source=SourceConfig(count=5_000, mean_photons=1.0, policy="fixed"))
        a = angle_scan(cfg, [0.0, 45.0, 90.0], jobs=1)
        b = angle_scan(cfg, [0.0, 45.0, 90.0], jobs=2)
        assert a.coincidences.tolist() == b.coincidences.tolist()

    def test_errors(self):
        with pytest.raises(ValueError):
            angle_scan(boosted_config(), [])
        with pytest.raises(ValueError):
            angle_scan(replace(boosted_config(), eve=None), [0.0])


class TestDistortion:
    @staticmethod
    def ratio(origin_deg, retardance):
        setup = EveSetup(tap_to_eve=1, measurement_throughput=1, analysis_pbs=PbsSpec(0, 1000),
                         distortion=WaveplateSpec(retardance, 90.0))
        a = math.radians(origin_deg)
        probs = [analyzer_probability(np.array([complex(math.cos(a))]), np.array([complex(math.sin(a))]),
                                      setup.at_angle(t))[0] for t in np.arange(0, 180, 0.25)]
        return max(probs) / min(probs)

    def test_da_ratio_falls_hv_ratio_unchanged(self):
        rets = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8]
        da = [self.ratio(45, r) for r in rets]
        hv = [self.ratio(0, r) for r in rets]
        assert all(x > y for x, y in zip(da, da[1:]))
        assert hv == pytest.approx([hv[0]] * len(rets), rel=1e-9)

    def test_no_distortion_identifies_origin_without_error(self):
        setup = EveSetup(tap_to_eve=1, measurement_throughput=1)
        for deg in (0, 90):
            a = math.radians(deg)
            h, v = np.array([complex(math.cos(a))]), np.array([complex(math.sin(a))])
            assert analyzer_probability(h, v, setup.at_angle(deg))[0] == pytest.approx(1)
            assert analyzer_probability(h, v, setup.at_angle(deg + 90))[0] == pytest.approx(0, abs=1e-15)
