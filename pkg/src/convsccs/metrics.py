"""Accuracy of estimated relative-incidence curves against ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError


@dataclass
class EvalReport:
    exposure_mae: float
    baseline_mae: float
    per_drug_mae: list = field(default_factory=list)

    def rows(self, drug_labels=None) -> list:
        """``(metric, value)`` pairs, one per metric."""
        out = [("exposure_mae", self.exposure_mae), ("baseline_mae", self.baseline_mae)]
        labels = drug_labels or [str(j) for j in range(len(self.per_drug_mae))]
        out.extend((f"mae_{lab}", v) for lab, v in zip(labels, self.per_drug_mae))
        return out


def mae(estimated, truth) -> float:
    """Mean absolute difference over every (drug, lag) entry."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise DimensionError(f"shape mismatch: estimated {est.shape} vs truth {tru.shape}")
    if est.size == 0:
        return 0.0
    return float(np.mean(np.abs(est - tru)))


def normalize_baseline(curve, interval_length: float = 1.0) -> np.ndarray:
    """Rescale a positive per-interval curve to unit discrete integral."""
    c = np.asarray(curve, dtype=float)
    if c.size == 0 or np.any(~(c > 0)):
        raise DomainError("baseline curve values must be positive")
    return c / (c.sum() * interval_length)


def evaluate(estimated_curves, true_curves, estimated_baseline, true_baseline) -> EvalReport:
    est = np.asarray(estimated_curves, dtype=float)
    tru = np.asarray(true_curves, dtype=float)
    if est.shape != tru.shape:
        raise DimensionError(f"shape mismatch: estimated {est.shape} vs truth {tru.shape}")
    per_drug = [mae(e, t) for e, t in zip(est, tru)]
    return EvalReport(
        exposure_mae=mae(est, tru),
        baseline_mae=mae(normalize_baseline(estimated_baseline), normalize_baseline(true_baseline)),
        per_drug_mae=per_drug,
    )
