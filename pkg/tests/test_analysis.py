import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from backflash import pipeline
from backflash.analysis import (CoincidenceHistogram, EstimateWarning, KeyRateInput, RMatrix, binary_entropy,
                                build_histogram, coincidence_ratio_matrix, detect_peaks, estimate_pb,
                                estimate_pb_sigma, expected_leakage, fit_malus, key_rate, key_rate_detail,
                                leak_ec_estimate, observed_leakage, pair_delays, predicted_pair_coincidence,
                                tagged_coincidences, worst_case_tag_fraction)
from backflash.devices import ApdParams, BackflashProfile, EfficiencyCurve
from backflash.engine import LinkConfig, ScenarioConfig, SourceConfig, run_scenario

import oracles


class TestHistogram:
    def test_half_open_edges(self):
        h = build_histogram([(0, 0), (0, 999), (0, 1000), (0, 1999), (0, 2000), (0, -1)], 1000, (0, 2000))
        assert h.counts.tolist() == [2, 2]
        assert (h.underflow, h.overflow) == (1, 1)
        assert h.edges.tolist() == [0, 1000, 2000]
        assert h.total == 6

    def test_delta_spike(self):
        h = build_histogram([(10 * k, 10 * k + 5500) for k in range(100)], 1000, (-10_000, 10_000))
        assert h.counts[15] == 100 and h.counts.sum() == 100

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            build_histogram([], 0, (0, 10))

    @given(st.lists(st.tuples(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6)), max_size=50),
           st.integers(1, 5000))
    def test_conserves_pairs(self, pairs, width):
        h = build_histogram(pairs, width, (-10**5, 10**5))
        assert h.total == len(pairs)

    def test_profile_chi_square(self, rng):
        prof = BackflashProfile()
        samples_ps = np.round(prof.sample(rng, 200_000) * 1000).astype(np.int64)
        h = build_histogram(np.column_stack([np.zeros_like(samples_ps), samples_ps]), 1000, (0, 20_000))
        edges = h.edges / 1000
        cdf = np.array([oracles.profile_cdf(t, prof.rise_time_constant, prof.decay_time_constant,
                                            prof.quench_time, prof.residual_after_quench)
                        for t in edges])
        expected = np.diff(cdf) * len(samples_ps)
        keep = expected > 5
        obs, exp = h.counts[keep], expected[keep]
        exp = exp * obs.sum() / exp.sum()
        assert stats.chisquare(obs, exp).pvalue > 1e-3


class TestPairDelays:
    def test_matches_brute_force(self, rng):
        r = np.sort(rng.integers(0, 10**6, 300))
        c = np.sort(rng.integers(0, 10**6, 300))
        got = sorted(pair_delays(r, c, -5000, 8000).tolist())
        want = sorted(int(y - x) for x in r for y in c if -5000 <= y - x < 8000)
        assert got == want

    def test_empty(self):
        assert len(pair_delays([], [1, 2], 0, 10)) == 0


class TestPeaks:
    def test_finds_injected_peak(self, rng):
        counts = rng.poisson(50, 200)
        counts[80:84] += 400
        peaks = detect_peaks(CoincidenceHistogram(1000, 0, counts), 5)
        assert len(peaks) == 1
        assert peaks[0].start == 80_000 and peaks[0].end == 84_000
        assert peaks[0].area == pytest.approx(1600, rel=0.1)

    def test_flat_background_has_no_false_peaks(self, rng):
        false = sum(len(detect_peaks(CoincidenceHistogram(1000, 0, rng.poisson(100, 500)), 5))
                    for _ in range(20))
        assert false == 0

    def test_empty_background_floor(self):
        counts = np.zeros(100, dtype=np.int64)
        counts[3] = 1
        assert detect_peaks(CoincidenceHistogram(1000, 0, counts), 5) == []
        counts[50] = 20
        assert len(detect_peaks(CoincidenceHistogram(1000, 0, counts), 5)) == 1


class TestEstimators:
    def test_estimate_pb_values(self):
        assert estimate_pb(37643, 0.6, 0.97, 1e6) == pytest.approx(0.06468, abs=1e-5)
        assert estimate_pb(2306, 0.62, 0.83, 1e6) == pytest.approx(4.481e-3, abs=1e-6)

    def test_estimate_pb_validation(self):
        with pytest.raises(ValueError):
            estimate_pb(1, 0.6, 0.9, 0)
        with pytest.raises(ValueError):
            estimate_pb(1, 0, 0.9, 10)
        with pytest.warns(EstimateWarning):
            assert estimate_pb(100, 0.1, 0.1, 10) == 1.0

    def test_sigma_is_binomial(self):
        assert estimate_pb_sigma(100, 0.5, 1.0, 10_000) == pytest.approx(
            oracles.binomial_sigma(10_000, 0.01) / 10_000 / 0.5)

    def test_leakage_and_tag_fraction(self):
        assert expected_leakage(0.6, 0.6, 0.091, 0.065) == pytest.approx(1.0647e-3, rel=1e-4)
        assert worst_case_tag_fraction(0.065, 0.091) == pytest.approx(5.915e-3)
        with pytest.raises(ValueError):
            expected_leakage(1.2, 0.5, 0.5, 0.5)


class TestRMatrix:
    def test_from_counts(self):
        r = RMatrix.from_counts({("H", "H"): (30, 1000), ("H", "V"): (10, 1000), ("V", "V"): (5, 0)})
        assert r.ratio("H", "H") == 0.03
        assert r.ratio("V", "V") == 0.0
        assert observed_leakage(r, "H") == pytest.approx(0.02)

    def test_negative_leakage_returned(self):
        r = RMatrix.from_counts({("H", "H"): (1, 100), ("H", "V"): (3, 100)})
        assert observed_leakage(r, "H") == pytest.approx(-0.02)

    def test_from_simulation_and_ground_truth(self):
        det = ApdParams(efficiency_curve=EfficiencyCurve.constant(0.6), dark_count_rate=0, backflash_prob=0.5)
        cfg = ScenarioConfig(source=SourceConfig(count=100_000, mean_photons=0.5),
                             detectors={c: det for c in "HVDA"}, seed=3)
        cfg = replace(cfg, eve=replace(cfg.eve, spcm=det, tap_to_eve=1.0, gate_window=(0.0, 60.0),
                                       path_delay=2.0))
        logs = {lab: run_scenario(replace(cfg, eve=cfg.eve.at_angle(a)), k)
                for k, (lab, a) in enumerate({"H": 0.0, "V": 90.0}.items())}
        r = coincidence_ratio_matrix(logs, cfg.eve.window_ps, channels=["H", "V"])
        # no dark counts: diagonal cells are dominated by true tags; the rest are
        # multi-photon pulses clicking two channels inside one gate
        for c in ("H", "V"):
            tagged = tagged_coincidences(logs[c], c)
            assert r.coincidences[r.rows.index(c), r.cols.index(c)] == pytest.approx(tagged, rel=0.1)
        assert observed_leakage(r, "H") > 0
        assert observed_leakage(r, "V") > 0

    def test_empty_cell_raises(self):
        det = ApdParams(efficiency_curve=EfficiencyCurve.constant(0.6), dark_count_rate=0)
        cfg = ScenarioConfig(source=SourceConfig(count=0), detectors={c: det for c in "HVDA"})
        with pytest.raises(ValueError, match="undefined"):
            coincidence_ratio_matrix({"H": run_scenario(cfg)}, (0, 10))


class TestKeyRate:
    def test_binary_entropy(self):
        assert binary_entropy(0.11) == pytest.approx(0.49991, abs=1e-5)
        assert binary_entropy(0) == binary_entropy(1) == 0
        with pytest.raises(ValueError):
            binary_entropy(1.5)

    @given(st.floats(0, 1))
    def test_entropy_matches_oracle(self, x):
        assert binary_entropy(x) == pytest.approx(oracles.binary_entropy(x), abs=1e-12)

    def test_reference_point(self):
        leak = leak_ec_estimate(0.05, 0.1)
        assert key_rate(KeyRateInput(0.1, 0.05, leak, 0.001)) == pytest.approx(0.0361, abs=1e-4)

    @given(st.floats(0.01, 1), st.floats(0, 0.2), st.floats(0, 0.3), st.floats(0, 1))
    def test_matches_oracle_and_nonnegative(self, p_det, qber, leak, frac):
        inp = KeyRateInput(p_det, qber, leak, frac * p_det)
        got = key_rate(inp)
        assert got >= 0
        assert got == pytest.approx(oracles.bb84_tagged_rate(p_det, qber, leak, frac * p_det), abs=1e-12)

    @given(st.floats(0.01, 1), st.floats(0, 0.1), st.floats(0, 0.05), st.floats(0, 0.5), st.floats(0, 0.5))
    def test_monotone_in_tagging(self, p_det, qber, leak, f1, f2):
        lo, hi = sorted((f1, f2))
        assert key_rate(KeyRateInput(p_det, qber, leak, hi * p_det)) <= key_rate(
            KeyRateInput(p_det, qber, leak, lo * p_det)) + 1e-15

    def test_abort_reasons(self):
        assert key_rate_detail(KeyRateInput(0.1, 0.05, 0.0, 0.1)).abort_reason == "tagged_fraction"
        assert key_rate_detail(KeyRateInput(0.1, 0.3, 0.0, 0.05)).abort_reason == "qber_over_half"
        assert key_rate_detail(KeyRateInput(0.1, 0.05, 0.5, 0.0)).abort_reason == "negative_rate"
        with pytest.raises(ValueError):
            KeyRateInput(0.1, 0.05, 0.0, 2.0)


class TestMalusFit:
    def test_exact_curve(self):
        a = np.arange(0, 360, 5)
        y = 3 + 10 * np.cos(np.radians(a - 30)) ** 2
        off, amp, phase, r2 = fit_malus(a, y)
        assert (off, amp, phase) == pytest.approx((3, 10, 30), abs=1e-9)
        assert r2 == pytest.approx(1)


def pair_config(statistics, pb=0.01, clicks=200_000, seed=11):
    det = ApdParams(efficiency_curve=EfficiencyCurve.constant(0.6), dark_count_rate=100,
                    backflash_prob=pb, emission_statistics=statistics)
    spcm = replace(det, dark_count_rate=10, electronic_delay=40.0)
    return ScenarioConfig(topology="detector_pair", source=SourceConfig(count=0, mean_photons=0),
                          detectors={"DUT": det, "SPCM": spcm}, link=LinkConfig(0.97, 10.0),
                          seed=seed, target_clicks=clicks)


@pytest.mark.parametrize("statistics", ["single", "poisson"])
def test_closed_loop_pair_estimate(tmp_path, statistics):
    cfg = pair_config(statistics)
    pipeline.simulate(cfg, tmp_path)
    est = pipeline.analyze(tmp_path)
    eta_t = 0.6 * 0.97
    if statistics == "single":
        truth = 0.01
    else:
        truth = (1 - (1 - 0.01) ** eta_t) / eta_t
    assert predicted_pair_coincidence(cfg) / eta_t == pytest.approx(truth, rel=1e-3)
    assert abs(est["backflash_prob"] - truth) < 3 * est["backflash_prob_sigma"]
