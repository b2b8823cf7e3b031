import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsccs.design import active_coordinates, baseline_groups, build_lagged_design
from convsccs.errors import ConfigError
from convsccs.timeline import CohortTimeline, IntervalGrid, PatientTimeline

from conftest import random_cohort


def _cohort(starts, K=12, window=(0, 12), d=1):
    ev = np.array([window[0]])
    pt = PatientTimeline("a", window[0], window[1], ev, np.array([1]),
                         tuple(np.array(s, dtype=np.int64) for s in starts))
    return CohortTimeline(IntervalGrid(K), (pt,), tuple(f"d{j}" for j in range(d)))


def naive_active(cohort, p, group_of, G, n_lags):
    """Per (patient, interval) coordinate multiplicities straight from the double sum."""
    out = {}
    for i, pt in enumerate(cohort.patients):
        for k in range(pt.obs_start, pt.obs_end):
            mult = {int(group_of[k]): 1}
            for j, starts in enumerate(pt.exposure_starts):
                for c in starts:
                    if 0 <= k - c <= p:
                        coord = G + j * n_lags + int(k - c)
                        mult[coord] = mult.get(coord, 0) + 1
            out[i, k] = sorted(mult.items())
    return out


class TestBuild:
    def test_single_dirac(self):
        des = build_lagged_design(_cohort([[5]]), 2)
        G = des.n_baseline_groups
        for lag, k in enumerate((5, 6, 7)):
            assert active_coordinates(des, 0, k) == [(k, 1), (G + lag, 1)]
        assert active_coordinates(des, 0, 8) == [(8, 1)]

    def test_no_exposure(self):
        des = build_lagged_design(_cohort([[]]), 3)
        for k in range(12):
            assert active_coordinates(des, 0, k) == [(k, 1)]

    def test_overlapping_starts(self):
        des = build_lagged_design(_cohort([[5, 6]]), 2)
        G = des.n_baseline_groups
        assert active_coordinates(des, 0, 6) == [(6, 1), (G + 0, 1), (G + 1, 1)]
        assert active_coordinates(des, 0, 7) == [(7, 1), (G + 1, 1), (G + 2, 1)]

    def test_multiplicity_for_repeated_lag_across_drugs(self):
        des = build_lagged_design(_cohort([[2], [2]], d=2), 1)
        G, L = des.n_baseline_groups, des.n_lags
        assert active_coordinates(des, 0, 3) == [(3, 1), (G + 1, 1), (G + L + 1, 1)]

    def test_out_of_window_is_empty(self):
        des = build_lagged_design(_cohort([[1]], window=(3, 8)), 2)
        assert active_coordinates(des, 0, 2) == []
        assert active_coordinates(des, 0, 8) == []
        # exposure before the window still reaches into it
        assert des.exposure_coord(0, 2) in dict(active_coordinates(des, 0, 3))

    def test_window_longer_than_study(self):
        with pytest.raises(ConfigError):
            build_lagged_design(_cohort([[]]), 12)
        with pytest.raises(ConfigError):
            build_lagged_design(_cohort([[]]), -1)

    def test_param_count(self):
        des = build_lagged_design(random_cohort(np.random.default_rng(0), K=20, d=3), 4, baseline_group_width=5)
        assert des.n_params == des.n_baseline_groups + 3 * 5
        assert des.n_baseline_groups == 4

    def test_matches_naive_double_sum(self, rng):
        for _ in range(10):
            c = random_cohort(rng, m=5, K=15, d=3, max_starts=3)
            p = int(rng.integers(0, 5))
            width = int(rng.integers(1, 5))
            des = build_lagged_design(c, p, width)
            want = naive_active(c, p, des.baseline_group_of, des.n_baseline_groups, des.n_lags)
            for (i, k), coords in want.items():
                assert active_coordinates(des, i, k) == coords

    def test_zero_coefficients_give_unit_intensity(self, small_cohort):
        des = build_lagged_design(small_cohort, 2)
        assert np.all(des.X @ np.zeros(des.n_params) == 0)
        assert des.n_rows == sum(p.n_window for p in small_cohort.patients)


class TestBaselineGroups:
    def test_remainder_goes_to_last_bucket(self):
        g = baseline_groups(10, 3)
        assert g.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]

    def test_single_bucket_when_wider_than_study(self):
        assert set(baseline_groups(4, 10).tolist()) == {0}

    def test_exactly_one_baseline_per_row(self, small_cohort):
        des = build_lagged_design(small_cohort, 2, baseline_group_width=4)
        base = des.X[:, :des.n_baseline_groups].toarray()
        assert np.all(base.sum(axis=1) == 1)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_sparsity_bound_first_only(self, seed, p):
        c = random_cohort(np.random.default_rng(seed), m=4, K=20, d=3, max_starts=3, min_gap=p)
        des = build_lagged_design(c, p)
        n_exposure = np.diff(des.X.indptr) - 1
        assert np.all(n_exposure <= c.n_drugs)
        assert np.all(des.X.data[des.X.indices >= des.n_baseline_groups] == 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_shift_equivariance(self, seed, s):
        rng = np.random.default_rng(seed)
        K = 30
        starts = [np.unique(rng.integers(0, 10, size=2)), np.unique(rng.integers(0, 10, size=1))]
        a, b = 2, 12
        base = CohortTimeline(IntervalGrid(K), (PatientTimeline("a", a, b, np.array([a]), np.array([1]), tuple(starts)),), ("x", "y"))
        moved = CohortTimeline(IntervalGrid(K), (PatientTimeline("a", a + s, b + s, np.array([a + s]), np.array([1]),
                                                                 tuple(st_ + s for st_ in starts)),), ("x", "y"))
        p = 3
        d0, d1 = build_lagged_design(base, p), build_lagged_design(moved, p)
        G = d0.n_baseline_groups
        for k in range(a, b):
            c0 = {c: m for c, m in active_coordinates(d0, 0, k) if c >= G}
            c1 = {c: m for c, m in active_coordinates(d1, 0, k + s) if c >= G}
            assert c0 == c1
            assert [c for c, _ in active_coordinates(d1, 0, k + s) if c < G] == [k + s]

    def test_subset_keeps_rows(self, small_cohort):
        des = build_lagged_design(small_cohort, 2)
        sub = des.subset([3, 1])
        assert sub.patient_ids == (des.patient_ids[3], des.patient_ids[1])
        assert (sub.X[sub.patient_rows(0)] != des.X[des.patient_rows(3)]).nnz == 0
