"""Discrete conditional-Poisson (SCCS) likelihood.

For patient ``i`` the outcome counts over the window follow a multinomial
with probabilities ``p_ik = lambda_ik / sum_k' lambda_ik'`` where
``log lambda_ik`` is the row ``(i, k)`` of ``design.X @ coef``.  Individual
multiplicative effects cancel in the ratio, so only the baseline and lag
coefficients enter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .design import LaggedDesign, RowDesign
from .errors import DimensionError, DomainError
from .timeline import CohortTimeline


@dataclass(eq=False)
class ModelParams:
    """Flat coefficient vector with the baseline / per-drug block layout."""

    coef: np.ndarray
    n_baseline_groups: int
    n_drugs: int
    n_lags: int

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        expected = self.n_baseline_groups + self.n_drugs * self.n_lags
        if self.coef.shape != (expected,):
            raise DimensionError(f"expected {expected} coefficients, got shape {self.coef.shape}")

    @classmethod
    def zeros(cls, design: LaggedDesign) -> "ModelParams":
        return cls(np.zeros(design.n_params), design.n_baseline_groups, design.n_drugs, design.n_lags)

    @classmethod
    def from_blocks(cls, baseline, blocks) -> "ModelParams":
        baseline = np.asarray(baseline, dtype=float)
        blocks = [np.asarray(b, dtype=float) for b in blocks]
        n_lags = blocks[0].size if blocks else 0
        if any(b.size != n_lags for b in blocks):
            raise DimensionError("all exposure blocks must have the same length")
        return cls(np.concatenate([baseline, *blocks]), baseline.size, len(blocks), n_lags)

    def like(self, coef) -> "ModelParams":
        return ModelParams(np.array(coef, dtype=float), self.n_baseline_groups, self.n_drugs, self.n_lags)

    @property
    def baseline(self) -> np.ndarray:
        return self.coef[: self.n_baseline_groups]

    @property
    def exposure_blocks(self) -> list:
        G, L = self.n_baseline_groups, self.n_lags
        return [self.coef[G + j * L: G + (j + 1) * L] for j in range(self.n_drugs)]

    def block(self, drug: int) -> np.ndarray:
        return self.exposure_blocks[drug]

    def copy(self) -> "ModelParams":
        return self.like(self.coef.copy())


def as_coef(params, design: RowDesign | None = None) -> np.ndarray:
    coef = params.coef if isinstance(params, ModelParams) else np.asarray(params, dtype=float)
    if design is not None and coef.shape != (design.n_params,):
        raise DimensionError(f"params have shape {coef.shape}, design expects ({design.n_params},)")
    return coef


def event_rows(events, design: RowDesign) -> np.ndarray:
    """Per-row outcome counts aligned with ``design`` rows.

    ``events`` is either a cohort (matched to the design by patient id) or an
    array that is already row-aligned.
    """
    if isinstance(events, CohortTimeline):
        by_id = {p.patient_id: p for p in events.patients}
        y = np.zeros(design.n_rows)
        for i, pid in enumerate(design.patient_ids):
            try:
                pt = by_id[pid]
            except KeyError:
                raise DimensionError(f"patient {pid!r} of the design is missing from the cohort") from None
            rows = design.patient_rows(i)
            if rows.stop - rows.start != pt.n_window:
                raise DimensionError(f"patient {pid!r}: window does not match the design")
            y[rows] = pt.counts_in_window()
        return y
    y = np.asarray(events, dtype=float)
    if y.shape != (design.n_rows,):
        raise DimensionError(f"event vector has shape {y.shape}, design has {design.n_rows} rows")
    return y


def patient_event_totals(y: np.ndarray, design: RowDesign) -> np.ndarray:
    if design.n_patients == 0:
        return np.zeros(0)
    return np.add.reduceat(y, design.row_ptr[:-1]) if y.size else np.zeros(design.n_patients)


def _patient_lse(eta: np.ndarray, row_ptr: np.ndarray) -> np.ndarray:
    starts = row_ptr[:-1]
    mx = np.maximum.reduceat(eta, starts)
    shifted = np.exp(eta - np.repeat(mx, np.diff(row_ptr)))
    return mx + np.log(np.add.reduceat(shifted, starts))


def per_patient_probs(params, design: RowDesign, patient: int) -> np.ndarray:
    """Outcome probabilities over the in-window intervals of one patient."""
    coef = as_coef(params, design)
    rows = design.patient_rows(patient)
    if rows.stop <= rows.start:
        raise DomainError(f"patient {patient} has an empty observation window")
    eta = design.X[rows] @ coef
    e = np.exp(eta - eta.max())
    return e / e.sum()


def per_patient_neg_log_likelihood(params, design: RowDesign, patient: int, events) -> float:
    """Unnormalized loss ``-sum_k y_ik log p_ik`` of one patient."""
    coef = as_coef(params, design)
    rows = design.patient_rows(patient)
    if rows.stop <= rows.start:
        raise DomainError(f"patient {patient} has an empty observation window")
    y = event_rows(events, design)[rows]
    eta = design.X[rows] @ coef
    mx = eta.max()
    lse = mx + np.log(np.exp(eta - mx).sum())
    return float(y.sum() * lse - y @ eta)


def _nll_and_probs(coef, design, y):
    eta = design.X @ coef
    lse = _patient_lse(eta, design.row_ptr)
    n_tot = patient_event_totals(y, design)
    return eta, lse, n_tot


def neg_log_likelihood(params, design: RowDesign, events) -> float:
    """``-(1/n) sum_i sum_k y_ik log p_ik`` with ``n`` the number of cases."""
    coef = as_coef(params, design)
    y = event_rows(events, design)
    if design.n_patients == 0:
        return 0.0
    eta, lse, n_tot = _nll_and_probs(coef, design, y)
    n_cases = np.count_nonzero(n_tot)
    if n_cases == 0:
        return 0.0
    return float((n_tot @ lse - y @ eta) / n_cases)


def gradient(params, design: RowDesign, events) -> np.ndarray:
    """Gradient of :func:`neg_log_likelihood` (multinomial-logit score)."""
    coef = as_coef(params, design)
    y = event_rows(events, design)
    if design.n_patients == 0:
        return np.zeros(design.n_params)
    eta, lse, n_tot = _nll_and_probs(coef, design, y)
    n_cases = np.count_nonzero(n_tot)
    if n_cases == 0:
        return np.zeros(design.n_params)
    lengths = np.diff(design.row_ptr)
    p = np.exp(eta - np.repeat(lse, lengths))
    resid = np.repeat(n_tot, lengths) * p - y
    return np.asarray(design.X.T @ resid).ravel() / n_cases


def hessian_vector(params, design: RowDesign, events, v: np.ndarray) -> np.ndarray:
    """Hessian of :func:`neg_log_likelihood` applied to ``v``."""
    coef = as_coef(params, design)
    y = event_rows(events, design)
    eta, lse, n_tot = _nll_and_probs(coef, design, y)
    n_cases = np.count_nonzero(n_tot)
    if n_cases == 0:
        return np.zeros(design.n_params)
    lengths = np.diff(design.row_ptr)
    p = np.exp(eta - np.repeat(lse, lengths))
    xv = design.X @ v
    mean_xv = np.add.reduceat(p * xv, design.row_ptr[:-1])
    w = np.repeat(n_tot, lengths) * p * (xv - np.repeat(mean_xv, lengths))
    return np.asarray(design.X.T @ w).ravel() / n_cases


def hessian_diagonal(params, design: RowDesign, events) -> np.ndarray:
    """Diagonal of the Hessian of :func:`neg_log_likelihood`."""
    coef = as_coef(params, design)
    y = event_rows(events, design)
    eta, lse, n_tot = _nll_and_probs(coef, design, y)
    n_cases = np.count_nonzero(n_tot)
    if n_cases == 0:
        return np.zeros(design.n_params)
    lengths = np.diff(design.row_ptr)
    p = np.exp(eta - np.repeat(lse, lengths))
    owner = np.repeat(np.arange(design.n_patients), lengths)
    P = sparse.csr_matrix((p, (owner, np.arange(design.n_rows))), shape=(design.n_patients, design.n_rows))
    first = np.asarray(design.X.multiply(design.X).T @ (np.repeat(n_tot, lengths) * p)).ravel()
    means = (P @ design.X).tocsr()
    second = np.asarray(means.multiply(means).T @ n_tot).ravel()
    return (first - second) / n_cases


def curvature_bound(params, design: RowDesign, events, n_iter: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of the largest Hessian eigenvalue at ``params``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(design.n_params)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        hv = hessian_vector(params, design, events, v)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            break
        v = hv / lam
    return lam
