"""Penalized fit, cross-validated penalty selection, refit and bootstrap bands."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .design import LaggedDesign, RowDesign, build_lagged_design
from .errors import ConfigError, DimensionError
from .likelihood import ModelParams, curvature_bound, event_rows, hessian_diagonal, neg_log_likelihood
from .metrics import normalize_baseline
from .prox import PenaltyConfig
from .solver import SolverConfig, solve
from .timeline import CohortTimeline

logger = logging.getLogger(__name__)

SEARCH_MODES = ("random", "grid")

DEFAULT_REFIT = SolverConfig(variant="full_prox_grad", n_epochs=2000, tolerance=1e-10, grad_tolerance=1e-9)


@dataclass(frozen=True)
class HyperSearchConfig:
    """Penalty search settings.

    ``candidates`` overrides the search with an explicit list of
    ``(gamma_tv, gamma_gl)`` pairs.  The grid mode uses
    ``ceil(sqrt(n_candidates))`` log-spaced levels per axis.
    """

    n_folds: int = 3
    search: str = "random"
    n_candidates: int = 50
    gamma_tv_range: tuple = (1e-4, 1e1)
    gamma_gl_range: tuple = (1e-4, 1e1)
    n_strata: int = 4
    rng_seed: int = 0
    candidates: tuple | None = None

    def __post_init__(self):
        if self.n_folds < 2:
            raise ConfigError(f"n_folds must be >= 2, got {self.n_folds}")
        if self.search not in SEARCH_MODES:
            raise ConfigError(f"unknown search mode {self.search!r}")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.n_strata < 1:
            raise ConfigError("n_strata must be >= 1")
        for name in ("gamma_tv_range", "gamma_gl_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must be a positive interval, got ({lo}, {hi})")
        if self.candidates is not None:
            cands = tuple((float(a), float(b)) for a, b in self.candidates)
            if not cands or any(a < 0 or b < 0 for a, b in cands):
                raise ConfigError("candidates must be a non-empty list of nonnegative pairs")
            object.__setattr__(self, "candidates", cands)

    def replace(self, **changes) -> "HyperSearchConfig":
        return replace(self, **changes)

    def candidate_list(self) -> list:
        if self.candidates is not None:
            return list(self.candidates)
        (tv_lo, tv_hi), (gl_lo, gl_hi) = self.gamma_tv_range, self.gamma_gl_range
        if self.search == "grid":
            n = math.ceil(math.sqrt(self.n_candidates))
            return [(tv, gl) for gl in np.geomspace(gl_lo, gl_hi, n) for tv in np.geomspace(tv_lo, tv_hi, n)]
        rng = np.random.default_rng(self.rng_seed)
        tv = np.exp(rng.uniform(np.log(tv_lo), np.log(tv_hi), self.n_candidates))
        gl = np.exp(rng.uniform(np.log(gl_lo), np.log(gl_hi), self.n_candidates))
        return [(float(a), float(b)) for a, b in zip(tv, gl)]


@dataclass(frozen=True)
class CVRow:
    gamma_tv: float
    gamma_gl: float
    mean: float
    se: float
    fold_scores: tuple = ()


@dataclass(frozen=True)
class Segment:
    """Lags ``start..stop`` (inclusive) sharing one coefficient value."""

    start: int
    stop: int
    value: float


@dataclass(frozen=True)
class DrugSupport:
    drug: int
    is_zero: bool
    segments: tuple

    def segment_ids(self, n_lags: int) -> np.ndarray:
        ids = np.empty(n_lags, dtype=np.int64)
        for s_id, seg in enumerate(self.segments):
            ids[seg.start:seg.stop + 1] = s_id
        return ids


@dataclass(eq=False)
class FitResult:
    params: ModelParams
    chosen_penalty: PenaltyConfig
    support: list
    window_length: int
    baseline_group_width: int = 1
    cv_table: list | None = None
    refit_params: ModelParams | None = None
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None
    n_bootstrap: int = 0
    design: LaggedDesign | None = field(default=None, repr=False)

    @property
    def reported_params(self) -> ModelParams:
        """Refit estimate when available, else the penalized one."""
        return self.refit_params if self.refit_params is not None else self.params


def _map(fn, items, n_jobs: int):
    # kernels release the GIL, so threads give real parallelism
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def extract_support(params: ModelParams) -> list:
    """Maximal runs of exactly equal consecutive lag coefficients, per drug."""
    out = []
    for j, block in enumerate(params.exposure_blocks):
        if not np.any(block):
            out.append(DrugSupport(j, True, (Segment(0, block.size - 1, 0.0),)))
            continue
        cuts = np.flatnonzero(np.diff(block) != 0) + 1
        starts = np.concatenate([[0], cuts])
        stops = np.concatenate([cuts - 1, [block.size - 1]])
        segs = tuple(Segment(int(a), int(b), float(block[a])) for a, b in zip(starts, stops))
        out.append(DrugSupport(j, False, segs))
    return out


def _ensure_design(cohort, window_length, baseline_group_width, design):
    if design is None:
        return build_lagged_design(cohort, window_length, baseline_group_width)
    if design.window_length != window_length:
        raise DimensionError("design window length does not match")
    return design


def fit(cohort: CohortTimeline, window_length: int, baseline_group_width: int = 1,
        penalty=(0.0, 0.0), solver_config: SolverConfig = SolverConfig(),
        design: LaggedDesign | None = None, init=None) -> FitResult:
    """Penalized fit at fixed penalty levels, with its support.

    ``penalty`` is a ``PenaltyConfig`` or a ``(gamma_tv, gamma_gl)`` pair.
    """
    design = _ensure_design(cohort, window_length, baseline_group_width, design)
    if not isinstance(penalty, PenaltyConfig):
        penalty = PenaltyConfig.for_params(design, *penalty)
    trace = solve(design, cohort, penalty, solver_config, init=init)
    params = trace.params
    return FitResult(params, penalty, extract_support(params), window_length,
                     baseline_group_width, design=design)


def first_event_intervals(design: RowDesign, y: np.ndarray) -> np.ndarray:
    out = np.full(design.n_patients, -1, dtype=np.int64)
    for i in range(design.n_patients):
        rows = design.patient_rows(i)
        hit = np.flatnonzero(y[rows] > 0)
        if hit.size:
            out[i] = design.row_interval[rows.start + hit[0]]
    return out


def stratified_folds(key: np.ndarray, n_folds: int, n_strata: int, rng) -> np.ndarray:
    """Fold label per patient, balanced within quantile strata of ``key``."""
    m = key.size
    if n_folds > m:
        raise ConfigError(f"{n_folds} folds requested for {m} patients")
    edges = np.quantile(key, np.linspace(0, 1, n_strata + 1)[1:-1]) if n_strata > 1 else np.zeros(0)
    strata = np.searchsorted(edges, key, side="right")
    folds = np.empty(m, dtype=np.int64)
    offset = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        members = members[rng.permutation(members.size)]
        folds[members] = (offset + np.arange(members.size)) % n_folds
        offset += members.size
    return folds


def select_one_se(cv_table) -> int:
    """Index of the most penalized candidate within one SE of the best.

    "Most penalized" orders by ``gamma_gl`` then ``gamma_tv``.
    """
    if not cv_table:
        raise ConfigError("empty CV table")
    means = np.array([r.mean for r in cv_table])
    best = int(np.argmin(means))
    threshold = means[best] + cv_table[best].se
    eligible = [i for i, r in enumerate(cv_table) if r.mean <= threshold]
    return max(eligible, key=lambda i: (cv_table[i].gamma_gl, cv_table[i].gamma_tv))


def cross_validate(cohort: CohortTimeline, window_length: int, baseline_group_width: int = 1,
                   search: HyperSearchConfig = HyperSearchConfig(),
                   solver_config: SolverConfig = SolverConfig(),
                   design: LaggedDesign | None = None, n_jobs: int = 1):
    """V-fold CV of the penalty with the one-standard-error rule.

    Returns ``(chosen PenaltyConfig, cv_table)``.  Validation scores are the
    unpenalized negative log-likelihood of the held-out fold.
    """
    if search.n_folds > cohort.n_patients:
        raise ConfigError(f"{search.n_folds} folds requested for {cohort.n_patients} patients")
    design = _ensure_design(cohort, window_length, baseline_group_width, design)
    y = event_rows(cohort, design)
    key = first_event_intervals(design, y)
    folds = stratified_folds(key, search.n_folds, search.n_strata, np.random.default_rng(search.rng_seed))

    splits = []
    for v in range(search.n_folds):
        train = np.flatnonzero(folds != v)
        test = np.flatnonzero(folds == v)
        tr, te = design.subset(train), design.subset(test)
        splits.append((tr, _rows_of(y, design, train), te, _rows_of(y, design, test)))

    candidates = search.candidate_list()
    tasks = [(c, v) for c in range(len(candidates)) for v in range(search.n_folds)]

    def run(task):
        c, v = task
        tr, y_tr, te, y_te = splits[v]
        pen = PenaltyConfig.for_params(design, *candidates[c])
        trace = solve(tr, y_tr, pen, solver_config)
        return neg_log_likelihood(trace.params, te, y_te)

    scores = np.array(_map(run, tasks, n_jobs)).reshape(len(candidates), search.n_folds)
    table = [
        CVRow(tv, gl, float(s.mean()), float(s.std(ddof=1) / math.sqrt(s.size)), tuple(float(x) for x in s))
        for (tv, gl), s in zip(candidates, scores)
    ]
    chosen = table[select_one_se(table)]
    return PenaltyConfig.for_params(design, chosen.gamma_tv, chosen.gamma_gl), table


def _rows_of(y, design, indices):
    if len(indices) == 0:
        return np.zeros(0)
    return np.concatenate([y[design.patient_rows(i)] for i in indices])


def reduction_matrix(support, n_baseline_groups: int, n_lags: int) -> sparse.csr_matrix:
    """Map from reduced coefficients (baseline, one per segment) to full ones."""
    rows = list(range(n_baseline_groups))
    cols = list(range(n_baseline_groups))
    col = n_baseline_groups
    for ds in support:
        if ds.is_zero:
            continue
        base = n_baseline_groups + ds.drug * n_lags
        for seg in ds.segments:
            for lag in range(seg.start, seg.stop + 1):
                rows.append(base + lag)
                cols.append(col)
            col += 1
    n_full = n_baseline_groups + len(support) * n_lags
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_full, col))


class _ReducedProblem:
    """Support-constrained, column-scaled problem shared by refit and bootstrap.

    Scaling each reduced column by the inverse square root of its curvature
    leaves the unpenalized optimum unchanged and makes plain gradient steps
    well conditioned.
    """

    def __init__(self, design: LaggedDesign, support, init: ModelParams, y):
        self.design = design
        self.template = init
        R = reduction_matrix(support, design.n_baseline_groups, design.n_lags)
        reduced = design.reparametrize(R)
        u0 = _project(R, init.coef)
        h = hessian_diagonal(u0, reduced, y)
        scale = np.where(h > 1e-12, 1.0 / np.sqrt(np.maximum(h, 1e-300)), 1.0)
        S = sparse.diags(scale)
        self.R = R
        self.RS = sparse.csr_matrix(R @ S)
        self.scale = scale
        self.scaled = reduced.reparametrize(S)
        self.u0 = u0 / scale
        self.penalty = PenaltyConfig()
        # one step for every replicate, set from the curvature at the start; backoff covers the rest
        self.step = 1.0 / max(2.0 * curvature_bound(self.u0, self.scaled, y), 1e-12)

    def solve(self, y, config: SolverConfig, init=None):
        start = self.u0 if init is None else init
        if config.step_size is None:
            config = config.replace(step_size=self.step)
        return solve(self.scaled, y, self.penalty, config, init=start)

    def full(self, u) -> ModelParams:
        return self.template.like(self.RS @ u)


def _project(R, coef):
    # least-squares representation of coef in the column span of R
    counts = np.asarray(R.sum(axis=0)).ravel()
    return (R.T @ coef) / np.maximum(counts, 1)


def refit_on_support(cohort: CohortTimeline, fit_result: FitResult,
                     solver_config: SolverConfig = DEFAULT_REFIT,
                     design: LaggedDesign | None = None) -> ModelParams:
    """Unpenalized refit with fused segments tied and zero blocks held at zero."""
    design = design or fit_result.design
    design = _ensure_design(cohort, fit_result.window_length, fit_result.baseline_group_width, design)
    y = event_rows(cohort, design)
    prob = _ReducedProblem(design, fit_result.support, fit_result.params, y)
    trace = prob.solve(y, solver_config.replace(variant="full_prox_grad"))
    return prob.full(trace.params)


def _replicate_rng(seed, b):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


def _resample(design: RowDesign, y: np.ndarray, coef: np.ndarray, rng) -> np.ndarray:
    eta = design.X @ coef
    out = np.zeros_like(y)
    for i in range(design.n_patients):
        rows = design.patient_rows(i)
        n_i = int(round(y[rows].sum()))
        if n_i == 0:
            continue
        e = np.exp(eta[rows] - eta[rows].max())
        out[rows] = rng.multinomial(n_i, e / e.sum())
    return out


def _log_total(phi):
    top = phi.max()
    return top + math.log(np.exp(phi - top).sum())


def bootstrap_ci(cohort: CohortTimeline, refit_params: ModelParams, design: LaggedDesign,
                 n_bootstrap: int = 200, confidence: float = 0.95, rng_seed=0,
                 support=None, solver_config: SolverConfig = DEFAULT_REFIT, n_jobs: int = 1):
    """Parametric-bootstrap percentile bands on ``exp(coef)``.

    Each replicate redraws every patient's ``n_i`` events from the fitted
    multinomial and refits on the fixed support.  ``rng_seed`` is an integer
    master seed (replicate ``b`` uses ``SeedSequence([seed, b])``) or an object
    with a ``multinomial`` method shared by all replicates.  Baseline
    coordinates of every replicate are shifted to the point estimate's overall
    level before the quantiles are taken.
    """
    if n_bootstrap < 2:
        raise ConfigError(f"need at least 2 bootstrap replicates, got {n_bootstrap}")
    if not 0 < confidence < 1:
        raise ConfigError(f"confidence must be in (0, 1), got {confidence}")
    support = support if support is not None else extract_support(refit_params)
    y = event_rows(cohort, design)
    prob = _ReducedProblem(design, support, refit_params, y)
    config = solver_config.replace(variant="full_prox_grad")
    shared = None if isinstance(rng_seed, (int, np.integer)) else rng_seed
    fitted = prob.full(prob.u0).coef
    group_of = design.baseline_group_of
    ref_level = _log_total(fitted[group_of])

    def replicate(yb):
        coef = prob.full(prob.solve(yb, config).params).coef
        # the baseline is identified up to a constant: pin each replicate to the point estimate's level
        coef[:design.n_baseline_groups] += ref_level - _log_total(coef[group_of])
        return np.exp(coef)

    if shared is not None:
        draws = [_resample(design, y, fitted, shared) for _ in range(n_bootstrap)]
        task = lambda b: replicate(draws[b])  # noqa: E731
    else:
        def task(b):
            return replicate(_resample(design, y, fitted, _replicate_rng(rng_seed, b)))

    samples = np.vstack(_map(task, list(range(n_bootstrap)), n_jobs))
    alpha = (1.0 - confidence) / 2.0
    lower = np.quantile(samples, alpha, axis=0)
    upper = np.quantile(samples, 1.0 - alpha, axis=0)
    return lower, upper


def relative_incidence(params: ModelParams, baseline_group_of=None):
    """Per-drug curves ``exp(theta)`` and the unit-integral baseline curve.

    ``baseline_group_of`` maps each interval to its baseline bucket (a
    ``LaggedDesign`` is accepted too); by default every bucket is one interval.
    """
    if isinstance(baseline_group_of, LaggedDesign):
        baseline_group_of = baseline_group_of.baseline_group_of
    if baseline_group_of is None:
        baseline_group_of = np.arange(params.n_baseline_groups)
    curves = np.exp(np.array(params.exposure_blocks).reshape(params.n_drugs, params.n_lags))
    phi = params.baseline[np.asarray(baseline_group_of)]
    return curves, normalize_baseline(np.exp(phi - phi.max()))


def run_pipeline(cohort: CohortTimeline, window_length: int, baseline_group_width: int = 1,
                 search: HyperSearchConfig = HyperSearchConfig(),
                 solver_config: SolverConfig = SolverConfig(),
                 refit_config: SolverConfig = DEFAULT_REFIT,
                 n_bootstrap: int = 200, confidence: float = 0.95, bootstrap_seed: int = 0,
                 n_jobs: int = 1, timings: dict | None = None) -> FitResult:
    """Cross-validation, fit, refit on support and (if ``n_bootstrap``) bands.

    ``timings``, when given, receives wall-clock seconds per phase.
    """
    import time

    clock = timings if timings is not None else {}
    t0 = time.perf_counter()
    design = build_lagged_design(cohort, window_length, baseline_group_width)
    clock["design"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    penalty, table = cross_validate(cohort, window_length, baseline_group_width, search,
                                    solver_config, design=design, n_jobs=n_jobs)
    clock["cross_validation"] = time.perf_counter() - t0
    logger.info("chosen penalty tv=%.3g gl=%.3g", penalty.gamma_tv, penalty.gamma_gl)

    t0 = time.perf_counter()
    result = fit(cohort, window_length, baseline_group_width, penalty, solver_config, design=design)
    result.cv_table = table
    clock["fit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result.refit_params = refit_on_support(cohort, result, refit_config, design=design)
    clock["refit"] = time.perf_counter() - t0

    if n_bootstrap:
        t0 = time.perf_counter()
        result.ci_lower, result.ci_upper = bootstrap_ci(
            cohort, result.refit_params, design, n_bootstrap, confidence, bootstrap_seed,
            support=result.support, solver_config=refit_config, n_jobs=n_jobs,
        )
        result.n_bootstrap = n_bootstrap
        clock["bootstrap"] = time.perf_counter() - t0
    return result


REPORT_COLUMNS = ("drug", "lag", "coef", "rel_incidence", "ci_low", "ci_high", "segment_id")


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".10g")


def report_rows(result: FitResult, drug_labels=None) -> list:
    """Report rows: one per (drug, lag), then one per baseline interval."""
    params = result.reported_params
    d, L = params.n_drugs, params.n_lags
    labels = list(drug_labels) if drug_labels is not None else [f"drug{j}" for j in range(d)]
    group_of = result.design.baseline_group_of if result.design is not None else np.arange(params.n_baseline_groups)
    curves, base_curve = relative_incidence(params, group_of)
    lo, hi = result.ci_lower, result.ci_upper
    G = params.n_baseline_groups
    rows = []
    for j, ds in enumerate(result.support):
        seg_ids = ds.segment_ids(L)
        for k in range(L):
            c = G + j * L + k
            rows.append((labels[j], k, _fmt(params.coef[c]), _fmt(curves[j, k]),
                         _fmt(None if lo is None else lo[c]), _fmt(None if hi is None else hi[c]),
                         str(int(seg_ids[k]))))
    # baseline bands are exp(phi) quantiles, put on the point estimate's unit-integral scale
    scale = math.exp(math.log(base_curve[0]) - params.coef[group_of[0]])
    for k, g in enumerate(group_of):
        band = (None, None) if lo is None else (lo[g] * scale, hi[g] * scale)
        rows.append(("baseline", k, _fmt(params.coef[g]), _fmt(base_curve[k]),
                     _fmt(band[0]), _fmt(band[1]), str(int(g))))
    return rows


def write_report(result: FitResult, path, drug_labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(report_rows(result, drug_labels))


def write_cv_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gamma_tv", "gamma_gl", "mean", "se"))
        for r in table:
            w.writerow((_fmt(r.gamma_tv), _fmt(r.gamma_gl), _fmt(r.mean), _fmt(r.se)))
