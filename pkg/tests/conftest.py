import numpy as np
import pytest

from convsccs.timeline import CohortTimeline, IntervalGrid, PatientTimeline


def random_cohort(rng, m=6, K=12, d=2, p=2, max_events=3, max_starts=2, min_gap=None, cases_only=True):
    """Small heterogeneous cohort: random windows, exposures and event counts."""
    patients = []
    for i in range(m):
        a = int(rng.integers(0, K // 2))
        b = int(rng.integers(a + 1, K + 1))
        starts = []
        for _ in range(d):
            n = int(rng.integers(0, max_starts + 1))
            cand = np.unique(rng.integers(0, K, size=n))
            if min_gap is not None and cand.size:
                kept = [cand[0]]
                for c in cand[1:]:
                    if c - kept[-1] > min_gap:
                        kept.append(c)
                cand = np.array(kept)
            starts.append(np.asarray(cand, dtype=np.int64))
        n_ev = int(rng.integers(1 if cases_only else 0, max_events + 1))
        ks = rng.integers(a, b, size=n_ev)
        iv, cnt = np.unique(ks, return_counts=True)
        patients.append(PatientTimeline(f"p{i}", a, b, iv.astype(np.int64), cnt.astype(np.int64), tuple(starts)))
    return CohortTimeline(IntervalGrid(K), tuple(patients), tuple(f"d{j}" for j in range(d)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cohort(rng):
    return random_cohort(rng)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
