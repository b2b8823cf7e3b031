"""Convolutional self-controlled case series.

Penalized estimation of lagged relative-incidence curves for several drug
exposures at once, from case-only longitudinal data.
"""
from .design import LaggedDesign, RowDesign, active_coordinates, build_lagged_design
from .errors import (
    ConfigError,
    ConvSCCSError,
    DimensionError,
    DivergenceError,
    DomainError,
    GapViolationError,
    ParseError,
    ValidationError,
)
from .estimator import (
    FitResult,
    HyperSearchConfig,
    bootstrap_ci,
    cross_validate,
    fit,
    refit_on_support,
    relative_incidence,
    run_pipeline,
    report_rows,
    select_one_se,
    write_cv_table,
    write_report,
)
from .likelihood import (
    ModelParams,
    gradient,
    neg_log_likelihood,
    per_patient_neg_log_likelihood,
    per_patient_probs,
)
from .metrics import EvalReport, evaluate, mae, normalize_baseline
from .prox import PenaltyConfig, penalty_value, prox_group_l2, prox_penalty, prox_tv
from .simulator import (
    GroundTruth,
    HawkesConfig,
    RiskProfile,
    SimScenario,
    sample_adjacency,
    simulate_cohort,
    simulate_hawkes,
    simulate_outcomes,
)
from .solver import FitTrace, SolverConfig, objective, solve
from .timeline import (
    CohortTimeline,
    EventRecord,
    IntervalGrid,
    PatientTimeline,
    enforce_exposure_gaps,
    ingest_events,
    read_event_file,
    validate_cases,
    write_event_file,
)

__version__ = "0.1.0"
