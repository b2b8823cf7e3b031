import numpy as np
import pytest
from scipy import stats

from convsccs.errors import ConfigError, DomainError
from convsccs.simulator import (
    PRESETS,
    PROFILE_KINDS,
    HawkesConfig,
    SimScenario,
    compute_intensities,
    exposures_from_events,
    make_risk_profile,
    outcome_probabilities,
    sample_adjacency,
    scenario_from_config,
    simulate_cohort,
    simulate_hawkes,
    simulate_outcomes,
)
from convsccs.timeline import IntervalGrid


class TestAdjacency:
    @pytest.mark.parametrize("d,q", [(4, 8), (14, 24)])
    def test_scale(self, d, q):
        cfg = sample_adjacency(d, q, np.random.default_rng(0))
        A = cfg.adjacency
        assert A.shape == (d, d)
        assert abs(np.linalg.norm(A, 2) - 0.1) < 1e-10
        off = A[~np.eye(d, dtype=bool)]
        assert np.count_nonzero(off) == q
        assert cfg.decay == 0.5
        assert np.all(cfg.baselines <= 5e-3)
        # diagonal holds the (pre-scaling) baselines up to a common factor
        ratio = np.diag(A) / cfg.baselines
        np.testing.assert_allclose(ratio, ratio[0])

    def test_q_out_of_range(self):
        with pytest.raises(ConfigError):
            sample_adjacency(3, 7, np.random.default_rng(0))

    def test_unstable_rejected(self):
        with pytest.raises(ConfigError):
            HawkesConfig(np.ones(2), np.full((2, 2), 0.6))


class TestHawkes:
    def test_silent_process(self):
        cfg = HawkesConfig(np.zeros(3), np.zeros((3, 3)))
        assert all(e.size == 0 for e in simulate_hawkes(cfg, 0))

    def test_events_sorted_in_horizon(self):
        cfg = HawkesConfig(np.full(2, 0.05), np.array([[0.2, 0.1], [0.0, 0.3]]), horizon=200.0)
        for e in simulate_hawkes(cfg, 4):
            assert np.all(np.diff(e) > 0) and np.all((e >= 0) & (e < 200))

    def test_poisson_mean(self):
        cfg = HawkesConfig(np.full(2, 0.005), np.zeros((2, 2)), horizon=750.0)
        rng = np.random.default_rng(1)
        counts = np.array([[e.size for e in simulate_hawkes(cfg, rng)] for _ in range(1000)])
        se = np.sqrt(3.75 / 1000)
        assert np.all(np.abs(counts.mean(axis=0) - 3.75) < 3 * se)

    def test_branching_mean(self):
        mu = np.array([0.02, 0.01])
        A = np.array([[0.3, 0.2], [0.1, 0.25]])
        cfg = HawkesConfig(mu, A, decay=2.0, horizon=400.0)
        # stationary total, computed independently of expected_counts()
        lam = np.linalg.inv(np.eye(2) - A) @ mu
        want = lam.sum() * 400.0
        rng = np.random.default_rng(2)
        totals = np.array([sum(e.size for e in simulate_hawkes(cfg, rng)) for _ in range(1000)])
        assert abs(totals.mean() - want) < 3 * totals.std(ddof=1) / np.sqrt(1000)
        assert cfg.expected_counts().sum() == pytest.approx(want)


class TestExposures:
    def test_first_event(self):
        out = exposures_from_events([np.array([12.3, 40.0]), np.array([])], IntervalGrid(100))
        assert out[0].tolist() == [12] and out[1].size == 0

    def test_shared_interval(self):
        out = exposures_from_events([np.array([5.5]), np.array([5.9])], IntervalGrid(10))
        assert out[0].tolist() == out[1].tolist() == [5]


class TestProfiles:
    @pytest.mark.parametrize("kind", PROFILE_KINDS)
    def test_bounds(self, kind):
        pr = make_risk_profile(kind, 50)
        assert pr.values.shape == (51,)
        assert np.all(pr.values > 0) and pr.values.max() <= 2
        if kind != "null":
            assert pr.values.max() >= 1.5

    def test_null_and_constant(self):
        assert np.all(make_risk_profile("null", 10).values == 1.0)
        assert np.all(make_risk_profile("constant", 10).values == 1.5)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_risk_profile("wobbly")


def _scenario(**kw):
    base = dict(profiles=("constant", "null"), n_patients=20, n_intervals=60, window_length=10)
    base.update(kw)
    return SimScenario(**base)


class TestIntensities:
    def test_no_exposure(self):
        sc = _scenario()
        lam = compute_intensities(sc, [(np.zeros(0, int), np.zeros(0, int))], [(0, 40)])[0]
        np.testing.assert_array_equal(lam[:40], sc.baseline()[:40])
        assert np.all(lam[40:] == 0.0)

    def test_null_profile_is_inert(self):
        sc = _scenario()
        none = compute_intensities(sc, [(np.zeros(0, int), np.zeros(0, int))], [(0, 60)])[0]
        null = compute_intensities(sc, [(np.zeros(0, int), np.array([3]))], [(0, 60)])[0]
        np.testing.assert_array_equal(none, null)

    def test_window_and_locality(self):
        sc = _scenario()
        lam = compute_intensities(sc, [(np.array([5]), np.zeros(0, int))], [(2, 50)])[0]
        base = sc.baseline()
        np.testing.assert_allclose(lam[5:16], 1.5 * base[5:16])
        np.testing.assert_array_equal(lam[16:50], base[16:50])
        assert np.all(lam[:2] == 0) and np.all(lam[50:] == 0)

    def test_exposure_near_study_end(self):
        sc = _scenario()
        lam = compute_intensities(sc, [(np.array([57]), np.zeros(0, int))], [(0, 60)])[0]
        np.testing.assert_allclose(lam[57:], 1.5 * sc.baseline()[57:])

    def test_individual_effects_cancel(self):
        sc = _scenario(n_patients=3)
        expo = [(np.array([4]), np.array([9])), (np.zeros(0, int), np.array([1])), (np.array([30]), np.zeros(0, int))]
        win = [(0, 60), (5, 30), (10, 59)]
        plain = compute_intensities(sc, expo, win)
        scaled = compute_intensities(sc.replace(individual_effects=np.array([0.5, 7.0, 2.0])), expo, win)
        for a, b in zip(plain, scaled):
            np.testing.assert_allclose(outcome_probabilities(a), outcome_probabilities(b), rtol=1e-14)


class TestOutcomes:
    def test_uniform_chi_square(self):
        lam = [np.ones(10)] * 10_000
        draws = simulate_outcomes(lam, 7)
        freq = np.bincount(draws, minlength=10)
        assert stats.chisquare(freq).pvalue > 1e-3

    def test_point_mass(self):
        lam = np.zeros(8)
        lam[5] = 2.0
        assert np.all(simulate_outcomes([lam] * 50, 0) == 5)

    def test_probabilities_sum_to_one(self, rng):
        assert abs(outcome_probabilities(rng.uniform(size=30)).sum() - 1) < 1e-12

    def test_zero_intensity(self):
        with pytest.raises(DomainError):
            outcome_probabilities(np.zeros(4))


class TestCohort:
    def test_empty(self):
        c, truth = simulate_cohort(_scenario(n_patients=0))
        assert c.n_patients == 0 and truth.profiles.shape == (2, 11)

    def test_determinism(self):
        sc = _scenario(rng_seed=9, mu_max=0.05, entry_max=0.05, n_offdiag=1)
        a, ta = simulate_cohort(sc)
        b, tb = simulate_cohort(sc)
        assert a.patients == b.patients and a.drug_labels == b.drug_labels
        np.testing.assert_array_equal(ta.hawkes.adjacency, tb.hawkes.adjacency)
        c, _ = simulate_cohort(sc.replace(rng_seed=10))
        assert c.patients != a.patients

    def test_case_only_single_event(self):
        c, truth = simulate_cohort(_scenario(mu_max=0.05))
        for pt in c.patients:
            assert pt.n_events == 1 and pt.obs_start == 0 and 1 <= pt.obs_end <= 60
            assert all(s.size <= 1 for s in pt.exposure_starts)
        assert abs(truth.baseline.sum() - 1) < 1e-12

    def test_set1_dimensions(self):
        sc = scenario_from_config({"preset": "set1", "m": "5"})
        assert (sc.n_drugs, sc.n_offdiag, sc.n_intervals, sc.window_length) == (4, 8, 750, 50)
        c, truth = simulate_cohort(sc)
        assert c.n_drugs == 4 and c.grid.n_intervals == 750 and truth.profiles.shape == (4, 51)

    def test_set2_dimensions(self):
        sc = scenario_from_config({"preset": "set2"})
        assert sc.n_drugs == 14 and sc.n_offdiag == 24 and sc.n_patients == 4000
        assert sum(k == "null" for k in sc.profiles) == 7

    def test_window_ends_centered_near_500(self):
        sc = scenario_from_config({"preset": "set1"})
        from convsccs.simulator import _window_ends
        ends = _window_ends(sc, np.random.default_rng(0))
        assert 480 < ends.mean() < 520


class TestScenarioConfig:
    def test_overrides(self):
        sc = scenario_from_config({"preset": "lookalike", "seed": "4", "m": "30"})
        assert sc.rng_seed == 4 and sc.n_patients == 30 and sc.n_intervals == 48

    def test_profiles_string(self):
        sc = scenario_from_config({"profiles": "null, late", "m": 3, "K": 40, "p": 5, "n_drugs": 2})
        assert sc.profiles == ("null", "late")

    def test_errors(self):
        with pytest.raises(ConfigError, match="colour"):
            scenario_from_config({"preset": "set1", "colour": "blue"})
        with pytest.raises(ConfigError, match="profiles"):
            scenario_from_config({"m": 3})
        with pytest.raises(ConfigError, match="n_drugs"):
            scenario_from_config({"profiles": "null", "m": 3, "n_drugs": 2})
        with pytest.raises(ConfigError):
            scenario_from_config({"preset": "set9"})
        with pytest.raises(ConfigError):
            _scenario(profiles=("null", "wobbly"))

    def test_presets_valid(self):
        for name in PRESETS:
            scenario_from_config({"preset": name})
