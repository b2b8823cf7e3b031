import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsccs.design import build_lagged_design
from convsccs.errors import DimensionError
from convsccs.likelihood import (
    ModelParams,
    curvature_bound,
    event_rows,
    gradient,
    hessian_diagonal,
    hessian_vector,
    neg_log_likelihood,
    per_patient_neg_log_likelihood,
    per_patient_probs,
)
from convsccs.timeline import CohortTimeline, IntervalGrid, PatientTimeline

from conftest import random_cohort


def naive_nll(coef, cohort, p, group_of, G):
    """-(1/n) sum_i sum_k y_ik log p_ik evaluated term by term."""
    L = p + 1
    total, n_cases = 0.0, 0
    for pt in cohort.patients:
        logs = []
        for k in range(pt.obs_start, pt.obs_end):
            s = coef[group_of[k]]
            for j, starts in enumerate(pt.exposure_starts):
                for c in starts:
                    if 0 <= k - c <= p:
                        s += coef[G + j * L + k - c]
            logs.append(s)
        lam = [math.exp(v) for v in logs]
        z = sum(lam)
        y = pt.counts_in_window()
        if y.sum() == 0:
            continue
        n_cases += 1
        for yk, lk in zip(y, lam):
            if yk:
                total -= yk * math.log(lk / z)
    return total / n_cases


def _instance(rng, m=6, K=12, d=2, p=2, width=1):
    c = random_cohort(rng, m=m, K=K, d=d, p=p)
    des = build_lagged_design(c, p, width)
    coef = rng.normal(scale=0.7, size=des.n_params)
    return c, des, coef


def _one_window(n=3):
    pt = PatientTimeline("a", 0, n, np.array([1]), np.array([1]), ())
    return CohortTimeline(IntervalGrid(n), (pt,), ())


class TestProbabilities:
    def test_uniform_at_zero(self):
        des = build_lagged_design(_one_window(), 0)
        np.testing.assert_allclose(per_patient_probs(np.zeros(des.n_params), des, 0), [1 / 3] * 3, atol=1e-15)

    def test_normalized_exponentials(self):
        des = build_lagged_design(_one_window(), 0)
        probs = per_patient_probs(np.log([1.0, 2.0, 1.0]), des, 0)
        np.testing.assert_allclose(probs, [0.25, 0.5, 0.25], atol=1e-15)

    def test_sums_to_one(self, rng):
        c, des, coef = _instance(rng)
        for i in range(des.n_patients):
            assert abs(per_patient_probs(coef, des, i).sum() - 1) < 1e-12

    def test_constant_shift_of_one_patient(self, rng):
        c, des, coef = _instance(rng)
        rows = des.patient_rows(2)
        eta = des.X[rows] @ coef
        e = np.exp(eta - eta.max())
        shifted = np.exp(eta + 3.7 - (eta + 3.7).max())
        np.testing.assert_allclose(e / e.sum(), shifted / shifted.sum(), atol=1e-12)

    def test_large_coefficients_stay_finite(self, rng):
        c, des, coef = _instance(rng)
        probs = per_patient_probs(coef * 400, des, 0)
        assert np.all(np.isfinite(probs)) and abs(probs.sum() - 1) < 1e-12
        assert np.isfinite(neg_log_likelihood(coef * 400, des, c))


class TestNegLogLikelihood:
    def test_uniform_single_event(self):
        des = build_lagged_design(_one_window(), 0)
        assert neg_log_likelihood(np.zeros(3), des, _one_window()) == pytest.approx(math.log(3), abs=1e-12)

    def test_event_at_heaviest_interval(self):
        des = build_lagged_design(_one_window(), 0)
        assert neg_log_likelihood(np.log([1.0, 2.0, 1.0]), des, _one_window()) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_naive_oracle(self, rng):
        for _ in range(10):
            c = random_cohort(rng, m=2, K=5, d=1, p=2)
            des = build_lagged_design(c, 2)
            coef = rng.normal(size=des.n_params)
            want = naive_nll(coef, c, 2, des.baseline_group_of, des.n_baseline_groups)
            assert neg_log_likelihood(coef, des, c) == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_matches_naive_oracle_grouped_baseline(self, rng):
        c, des, coef = _instance(rng, m=8, K=15, d=3, p=3, width=4)
        want = naive_nll(coef, c, 3, des.baseline_group_of, des.n_baseline_groups)
        assert neg_log_likelihood(coef, des, c) == pytest.approx(want, rel=1e-12)

    def test_per_patient_decomposition(self, rng):
        c, des, coef = _instance(rng)
        parts = [per_patient_neg_log_likelihood(coef, des, i, c) for i in range(des.n_patients)]
        assert sum(parts) / c.n_patients == pytest.approx(neg_log_likelihood(coef, des, c), abs=1e-12)

    def test_single_patient_cohort(self, rng):
        c, des, coef = _instance(rng, m=1)
        assert per_patient_neg_log_likelihood(coef, des, 0, c) == pytest.approx(neg_log_likelihood(coef, des, c), abs=1e-12)

    def test_uniform_probs_give_log_window(self, rng):
        c, des, _ = _instance(rng)
        for i, pt in enumerate(c.patients):
            one = pt.replace(event_intervals=pt.event_intervals[:1], event_counts=np.array([1]))
            y = event_rows(c.with_patients(c.patients[:i] + (one,) + c.patients[i + 1:]), des)
            assert per_patient_neg_log_likelihood(np.zeros(des.n_params), des, i, y) == pytest.approx(math.log(pt.n_window))

    def test_accepts_model_params(self, rng):
        c, des, coef = _instance(rng)
        params = ModelParams(coef, des.n_baseline_groups, des.n_drugs, des.n_lags)
        assert neg_log_likelihood(params, des, c) == neg_log_likelihood(coef, des, c)

    def test_shape_checks(self, rng):
        c, des, coef = _instance(rng)
        with pytest.raises(DimensionError):
            neg_log_likelihood(coef[:-1], des, c)
        with pytest.raises(DimensionError):
            neg_log_likelihood(coef, des, np.zeros(3))

    def test_baseline_shift_invariance(self, rng):
        c, des, coef = _instance(rng, width=3)
        shifted = coef.copy()
        shifted[:des.n_baseline_groups] += 5.0
        assert neg_log_likelihood(shifted, des, c) == pytest.approx(neg_log_likelihood(coef, des, c), abs=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.99))
    def test_convexity(self, seed, t):
        rng = np.random.default_rng(seed)
        c, des, x = _instance(rng)
        y = rng.normal(size=des.n_params)
        lhs = neg_log_likelihood(t * x + (1 - t) * y, des, c)
        assert lhs <= t * neg_log_likelihood(x, des, c) + (1 - t) * neg_log_likelihood(y, des, c) + 1e-10


def central_diff(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestGradient:
    def test_finite_differences(self, rng):
        worst = 0.0
        for _ in range(20):
            c = random_cohort(rng, m=int(rng.integers(2, 11)), K=int(rng.integers(6, 21)),
                              d=int(rng.integers(1, 4)), p=5)
            p = int(rng.integers(0, 6))
            p = min(p, c.grid.n_intervals - 1)
            des = build_lagged_design(c, p)
            x = rng.normal(scale=0.5, size=des.n_params)
            g = gradient(x, des, c)
            fd = central_diff(lambda v: neg_log_likelihood(v, des, c), x)
            worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))
        assert worst < 1e-5

    def test_baseline_block_sums_to_zero(self, rng):
        c, des, coef = _instance(rng, width=2)
        assert abs(gradient(coef, des, c)[:des.n_baseline_groups].sum()) < 1e-10

    def test_symmetric_coordinates_at_zero(self):
        # event in the middle of the window; window-average of the baseline coordinate equals its value
        pt = PatientTimeline("a", 0, 4, np.array([2]), np.array([1]), ())
        c = CohortTimeline(IntervalGrid(4), (pt,), ())
        des = build_lagged_design(c, 0, baseline_group_width=4)
        assert gradient(np.zeros(des.n_params), des, c)[0] == pytest.approx(0, abs=1e-15)

    def test_duplicated_patients(self, rng):
        c, des, coef = _instance(rng)
        dup = c.with_patients(c.patients + tuple(p.replace(patient_id=p.patient_id + "b") for p in c.patients))
        des2 = build_lagged_design(dup, des.window_length)
        np.testing.assert_allclose(gradient(coef, des2, dup), gradient(coef, des, c), atol=1e-14)


class TestCurvature:
    def test_hessian_vector_matches_gradient_differences(self, rng):
        c, des, coef = _instance(rng, width=2)
        v = rng.normal(size=des.n_params)
        h = 1e-6
        fd = (gradient(coef + h * v, des, c) - gradient(coef - h * v, des, c)) / (2 * h)
        np.testing.assert_allclose(hessian_vector(coef, des, c, v), fd, atol=1e-7)

    def test_diagonal(self, rng):
        c, des, coef = _instance(rng)
        eye = np.eye(des.n_params)
        want = np.array([hessian_vector(coef, des, c, e)[i] for i, e in enumerate(eye)])
        np.testing.assert_allclose(hessian_diagonal(coef, des, c), want, atol=1e-12)

    def test_power_iteration(self, rng):
        c, des, coef = _instance(rng)
        H = np.column_stack([hessian_vector(coef, des, c, e) for e in np.eye(des.n_params)])
        top = np.linalg.eigvalsh((H + H.T) / 2).max()
        assert curvature_bound(coef, des, c, n_iter=200) == pytest.approx(top, rel=1e-3)
