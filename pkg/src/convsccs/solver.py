"""Proximal SVRG and full-batch proximal gradient for the penalized objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .design import RowDesign
from .errors import ConfigError, DimensionError, DivergenceError
from .likelihood import (ModelParams, as_coef, curvature_bound, event_rows, neg_log_likelihood,
                         patient_event_totals)
from .prox import PenaltyConfig, penalty_value

logger = logging.getLogger(__name__)

VARIANTS = ("svrg", "full_prox_grad")


@dataclass(frozen=True)
class SolverConfig:
    """Optimizer settings.

    ``step_size=None`` selects ``1 / L``.  For ``svrg`` ``L`` is the per-case
    Lipschitz bound ``max_i n_i * max_k ||x_ik||^2``; for ``full_prox_grad`` it
    is twice the largest Hessian eigenvalue at the starting point, which is far
    less pessimistic for the averaged loss (step backoff guards the rest).  For
    ``full_prox_grad`` one epoch is a single full-gradient step.  ``inner_iters_per_epoch=None`` means one pass
    (number of cases) per SVRG epoch.

    ``grad_tolerance`` (``full_prox_grad`` only) additionally requires the
    sup-norm of the gradient mapping ``(w - prox(w - step * grad)) / step`` to
    fall below it before stopping; relative objective change alone can stop
    early on flat objectives.
    """

    step_size: float | None = None
    n_epochs: int = 100
    inner_iters_per_epoch: int | None = None
    tolerance: float = 1e-6
    rng_seed: int = 0
    variant: str = "svrg"
    max_backoffs: int = 10
    grad_tolerance: float | None = None

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if not self.tolerance >= 0:
            raise ConfigError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown solver variant {self.variant!r}")
        if self.n_epochs < 0:
            raise ConfigError("n_epochs must be >= 0")
        if self.grad_tolerance is not None:
            if self.variant != "full_prox_grad":
                raise ConfigError("grad_tolerance is only supported by the full_prox_grad variant")
            if not self.grad_tolerance > 0:
                raise ConfigError(f"grad_tolerance must be > 0, got {self.grad_tolerance}")

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass
class FitTrace:
    objectives: list
    params: object
    converged: bool
    n_epochs: int
    step_size: float
    n_backoffs: int = 0
    objective: float = float("nan")

    @property
    def final_objective(self) -> float:
        """Objective of the returned params (the lowest epoch-end value)."""
        return self.objective


def objective(params, design: RowDesign, events, penalty: PenaltyConfig) -> float:
    return neg_log_likelihood(params, design, events) + penalty_value(params, penalty)


def lipschitz_bound(design: RowDesign, n_events: np.ndarray) -> float:
    """Crude smoothness bound shared by every per-case loss."""
    if design.n_patients == 0:
        return 1.0
    L = float(np.max(n_events * design.max_row_sq_norm()))
    return L if L > 0 else 1.0


class _Problem:
    """Row-aligned arrays handed to the compiled kernels.

    Consecutive identical rows of a patient (typically unexposed intervals in
    one baseline bucket) are merged into one row carrying a log-count offset,
    which leaves the likelihood unchanged.
    """

    def __init__(self, design: RowDesign, y: np.ndarray, penalty: PenaltyConfig):
        X = design.X
        indptr = X.indptr.astype(np.int64)
        indices = X.indices.astype(np.int64)
        data = X.data.astype(np.float64)
        row_ptr = design.row_ptr.astype(np.int64)
        group, self.row_ptr = _kernels.merge_rows(indptr, indices, data, row_ptr)
        n_groups = int(self.row_ptr[-1])
        first = np.flatnonzero(np.diff(group, prepend=-1)) if group.size else np.zeros(0, dtype=np.int64)
        Xc = X[first]
        self.indptr = Xc.indptr.astype(np.int64)
        self.indices = Xc.indices.astype(np.int64)
        self.data = Xc.data.astype(np.float64)
        self.off = np.log(np.bincount(group, minlength=n_groups).astype(np.float64))
        self.y = np.bincount(group, weights=y, minlength=n_groups).astype(np.float64)
        self.n_ev = patient_event_totals(np.ascontiguousarray(y, dtype=np.float64), design).astype(np.float64)
        self.cases = np.flatnonzero(self.n_ev > 0).astype(np.int64)
        self.n_params = design.n_params
        lengths = np.diff(self.row_ptr)
        self.eta = np.empty(int(lengths.max()) if lengths.size else 0)
        self.penalty = penalty
        self.block_start, self.block_len = penalty.arrays()
        self.buf = np.empty(int(self.block_len.max()) if self.block_len.size else 0)

    def nll(self, w):
        if self.cases.size == 0:
            return 0.0
        return _kernels.full_nll(self.indptr, self.indices, self.data, self.off, self.row_ptr, self.y,
                                 self.n_ev, self.cases, w, self.eta)

    def objective(self, w):
        return self.nll(w) + penalty_value(w, self.penalty)

    def grad(self, w, out):
        if self.cases.size == 0:
            out[:] = 0.0
            return out
        _kernels.full_grad(self.indptr, self.indices, self.data, self.off, self.row_ptr, self.y,
                           self.n_ev, self.cases, w, out, self.eta)
        return out

    def prox(self, w, step):
        _kernels.prox_blocks(w, self.block_start, self.block_len,
                             step * self.penalty.gamma_tv, step * self.penalty.gamma_gl, self.buf)


def _rel_change(prev, cur):
    return abs(prev - cur) / max(abs(prev), 1e-300)


def solve(design: RowDesign, events, penalty: PenaltyConfig, config: SolverConfig = SolverConfig(),
          init=None) -> FitTrace:
    """Minimize ``neg_log_likelihood + penalty_value``.

    SVRG: each epoch anchors the full gradient at the current point, then takes
    ``inner_iters_per_epoch`` proximal steps on variance-reduced gradients of
    uniformly sampled cases (with replacement).  ``full_prox_grad`` takes one
    deterministic proximal-gradient step per epoch.  Both stop when the relative
    objective change between epochs falls below ``tolerance``.

    A non-finite objective (both variants) or an objective increase
    (``full_prox_grad``) halves the step and restarts the epoch from the last
    accepted point.  After ``max_backoffs`` halvings a non-finite objective
    raises ``DivergenceError``; a persistent tiny increase ends the run.  The
    returned params are those of the lowest epoch-end objective.
    """
    y = event_rows(events, design)
    if init is None:
        w = np.zeros(design.n_params)
    else:
        w = np.array(as_coef(init), dtype=float)
        if w.shape != (design.n_params,):
            raise DimensionError(f"init has shape {w.shape}, design expects ({design.n_params},)")
    if not np.all(np.isfinite(w)):
        raise ConfigError("init must be finite")
    for o, n in penalty.block_layout:
        if o + n > design.n_params:
            raise DimensionError("penalty layout does not match the design")

    prob = _Problem(design, y, penalty)
    if config.step_size is not None:
        step = config.step_size
    elif config.variant == "full_prox_grad":
        step = 1.0 / max(2.0 * curvature_bound(w, design, y), 1e-12)
    else:
        step = 1.0 / lipschitz_bound(design, prob.n_ev)
    rng = np.random.default_rng(config.rng_seed)
    n_inner = config.inner_iters_per_epoch or max(int(prob.cases.size), 1)

    obj = prob.objective(w)
    if not np.isfinite(obj):
        raise DivergenceError("objective is not finite at the initial point")
    objectives = [obj]
    best_w, best_obj = w.copy(), obj
    g = np.empty_like(w)
    v = np.empty_like(w)
    converged = False
    backoffs = 0
    epoch = 0
    while epoch < config.n_epochs:
        if prob.cases.size == 0:
            converged = True
            break
        if config.variant == "svrg":
            samples = prob.cases[rng.integers(0, prob.cases.size, size=n_inner)]
            w_anchor = w.copy()
            prob.grad(w_anchor, g)
            w_new = w.copy()
            _kernels.svrg_inner(prob.indptr, prob.indices, prob.data, prob.off, prob.row_ptr, prob.y, prob.n_ev,
                                samples, w_new, w_anchor, g, step, prob.block_start, prob.block_len,
                                step * penalty.gamma_tv, step * penalty.gamma_gl, prob.eta, v, prob.buf)
        else:
            prob.grad(w, g)
            w_new = w - step * g
            prob.prox(w_new, step)
        new_obj = prob.objective(w_new) if np.all(np.isfinite(w_new)) else np.inf
        increased = config.variant == "full_prox_grad" and new_obj > obj + 1e-12 * abs(obj)
        if not np.isfinite(new_obj) or increased:
            backoffs += 1
            if backoffs > config.max_backoffs:
                if np.isfinite(new_obj):
                    # no descent left at any tried step: numerically stationary
                    break
                raise DivergenceError(
                    f"objective diverged after {backoffs - 1} step halvings (step={step:.3g}); "
                    "try a smaller step_size"
                )
            step *= 0.5
            logger.debug("step backoff to %.3g at epoch %d", step, epoch)
            continue
        epoch += 1
        change = _rel_change(obj, new_obj)
        stationary = config.grad_tolerance is None or np.max(np.abs(w - w_new)) <= config.grad_tolerance * step
        w, obj = w_new, new_obj
        objectives.append(obj)
        if obj <= best_obj:
            best_w, best_obj = w.copy(), obj
        if change < config.tolerance and stationary:
            converged = True
            break

    params = init.like(best_w) if isinstance(init, ModelParams) else _wrap(best_w, design)
    return FitTrace(objectives, params, converged, epoch, step, backoffs, best_obj)


def _wrap(coef, design):
    if hasattr(design, "n_baseline_groups"):
        return ModelParams(coef, design.n_baseline_groups, design.n_drugs, design.n_lags)
    return coef
