"""Lagged (convolutional) design matrices.

Every in-window interval of every patient is one row of a sparse matrix whose
columns are the model coefficients: the baseline buckets first, then one block
of ``p + 1`` lag coefficients per drug.  Entries hold multiplicities, so the
log-intensity of a row is simply ``X @ coef``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigError, DimensionError, DomainError
from .timeline import CohortTimeline


@dataclass(frozen=True, eq=False)
class RowDesign:
    """Sparse per-interval design shared by the likelihood and the solvers.

    ``X`` has one row per (patient, in-window interval), patients stored
    contiguously: rows ``row_ptr[i]:row_ptr[i+1]`` belong to patient ``i``.
    """

    X: sparse.csr_matrix
    row_ptr: np.ndarray
    row_interval: np.ndarray
    patient_ids: tuple

    @property
    def n_params(self) -> int:
        return self.X.shape[1]

    @property
    def n_patients(self) -> int:
        return self.row_ptr.size - 1

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def patient_rows(self, i: int) -> slice:
        return slice(int(self.row_ptr[i]), int(self.row_ptr[i + 1]))

    def _subset_arrays(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        lengths = np.diff(self.row_ptr)[indices]
        rows = np.concatenate(
            [np.arange(self.row_ptr[i], self.row_ptr[i + 1]) for i in indices]
        ) if indices.size else np.zeros(0, dtype=np.int64)
        row_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        return rows, row_ptr, tuple(self.patient_ids[i] for i in indices)

    def subset(self, indices) -> "RowDesign":
        rows, row_ptr, ids = self._subset_arrays(indices)
        return RowDesign(self.X[rows], row_ptr, self.row_interval[rows], ids)

    def reparametrize(self, R: sparse.spmatrix) -> "RowDesign":
        """Design for coefficients ``u`` with full coefficients ``R @ u``."""
        if R.shape[0] != self.n_params:
            raise DimensionError(f"reduction matrix has {R.shape[0]} rows, design has {self.n_params} params")
        X = sparse.csr_matrix(self.X @ R)
        X.sort_indices()
        return RowDesign(X, self.row_ptr, self.row_interval, self.patient_ids)

    def max_row_sq_norm(self) -> np.ndarray:
        """Per-patient maximum of ``||x_ik||^2`` over that patient's rows."""
        sq = np.asarray(self.X.multiply(self.X).sum(axis=1)).ravel()
        if sq.size == 0:
            return np.zeros(self.n_patients)
        return np.maximum.reduceat(sq, self.row_ptr[:-1]) if self.n_patients else np.zeros(0)


@dataclass(frozen=True, eq=False)
class LaggedDesign(RowDesign):
    """Lagged design with the coefficient layout of the convolutional model."""

    window_length: int = 0
    n_drugs: int = 0
    baseline_group_of: np.ndarray = None
    obs_start: np.ndarray = None

    @property
    def n_baseline_groups(self) -> int:
        return int(self.baseline_group_of.max()) + 1

    @property
    def n_lags(self) -> int:
        return self.window_length + 1

    @property
    def n_intervals(self) -> int:
        return self.baseline_group_of.size

    def exposure_coord(self, drug: int, lag: int) -> int:
        return self.n_baseline_groups + drug * self.n_lags + lag

    def block_slices(self) -> list:
        G, L = self.n_baseline_groups, self.n_lags
        return [slice(G + j * L, G + (j + 1) * L) for j in range(self.n_drugs)]

    def subset(self, indices) -> "LaggedDesign":
        rows, row_ptr, ids = self._subset_arrays(indices)
        return LaggedDesign(
            self.X[rows], row_ptr, self.row_interval[rows], ids,
            self.window_length, self.n_drugs, self.baseline_group_of,
            self.obs_start[np.asarray(indices, dtype=np.int64)],
        )


def baseline_groups(n_intervals: int, group_width: int) -> np.ndarray:
    """Bucket index of each interval; the last bucket absorbs any remainder."""
    if group_width < 1:
        raise ConfigError(f"baseline group width must be >= 1, got {group_width}")
    n_groups = max(1, n_intervals // group_width)
    return np.minimum(np.arange(n_intervals) // group_width, n_groups - 1).astype(np.int64)


def build_lagged_design(cohort: CohortTimeline, window_length: int, baseline_group_width: int = 1) -> LaggedDesign:
    """Build the sparse lagged design of ``cohort``.

    Row ``(i, k)`` activates its baseline bucket with multiplicity one and, for
    each drug ``j``, the lag coefficient ``theta^j_{k-c}`` once per exposure
    start ``c`` with ``0 <= k - c <= window_length``.
    """
    p = int(window_length)
    K = cohort.grid.n_intervals
    if p < 0:
        raise ConfigError(f"window length must be >= 0, got {window_length}")
    if p >= K:
        raise ConfigError(f"risk window of {p} lags does not fit in a study of {K} intervals")
    group_of = baseline_groups(K, int(baseline_group_width))
    G = int(group_of.max()) + 1
    d = cohort.n_drugs
    n_lags = p + 1

    lengths = np.array([pt.n_window for pt in cohort.patients], dtype=np.int64)
    if np.any(lengths <= 0):
        raise DomainError("every patient needs a non-empty observation window")
    row_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    n_rows = int(row_ptr[-1])
    row_interval = np.empty(n_rows, dtype=np.int64)
    obs_start = np.array([pt.obs_start for pt in cohort.patients], dtype=np.int64)

    r_parts, c_parts = [], []
    for i, pt in enumerate(cohort.patients):
        base = row_ptr[i]
        ks = np.arange(pt.obs_start, pt.obs_end)
        row_interval[base:base + ks.size] = ks
        r_parts.append(base + np.arange(ks.size))
        c_parts.append(group_of[ks])
        for j, starts in enumerate(pt.exposure_starts):
            for c in starts:
                lo = max(int(c), pt.obs_start)
                hi = min(int(c) + p, pt.obs_end - 1)
                if lo > hi:
                    continue
                k = np.arange(lo, hi + 1)
                r_parts.append(base + k - pt.obs_start)
                c_parts.append(G + j * n_lags + (k - c))
    rows = np.concatenate(r_parts) if r_parts else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(c_parts) if c_parts else np.zeros(0, dtype=np.int64)
    X = sparse.coo_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(n_rows, G + d * n_lags)
    ).tocsr()
    X.sum_duplicates()
    X.sort_indices()
    return LaggedDesign(
        X, row_ptr, row_interval, tuple(pt.patient_id for pt in cohort.patients),
        p, d, group_of, obs_start,
    )


def active_coordinates(design: RowDesign, patient: int, interval: int) -> list:
    """Sorted ``(coordinate, multiplicity)`` pairs active at one interval.

    Intervals outside the patient's window yield an empty list.
    """
    rows = design.patient_rows(patient)
    offset = np.searchsorted(design.row_interval[rows], interval)
    r = rows.start + offset
    if r >= rows.stop or design.row_interval[r] != interval:
        return []
    lo, hi = design.X.indptr[r], design.X.indptr[r + 1]
    return [(int(c), int(round(m))) for c, m in zip(design.X.indices[lo:hi], design.X.data[lo:hi])]
