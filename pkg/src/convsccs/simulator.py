"""Synthetic case-series cohorts with Hawkes-driven drug exposures.

Drug purchases follow a multivariate Hawkes process with exponential kernels;
a patient is exposed to a drug from its first purchase on.  Outcome
intensities multiply a sinusoidal baseline by the risk profile of every
active exposure, and each patient draws exactly one outcome from the induced
multinomial over its observation window.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError
from .metrics import normalize_baseline
from .timeline import CohortTimeline, IntervalGrid, PatientTimeline

PROFILE_KINDS = (
    "null", "constant", "early_decreasing", "slow_decreasing", "unimodal",
    "rapid_drop", "intermediate", "late", "delayed",
)
SET1_PROFILES = ("unimodal", "constant", "early_decreasing", "slow_decreasing")
SET2_PROFILES = ("null",) * 7 + (
    "constant", "early_decreasing", "unimodal", "rapid_drop", "intermediate", "late", "delayed",
)
LOOKALIKE_PROFILES = ("null", "null", "null", "late", "null", "null")


@dataclass(frozen=True, eq=False)
class HawkesConfig:
    """Multivariate Hawkes process with kernels ``A[j, j'] * decay * exp(-decay * t)``."""

    baselines: np.ndarray
    adjacency: np.ndarray
    decay: float = 0.5
    horizon: float = 750.0

    def __post_init__(self):
        mu = np.asarray(self.baselines, dtype=float)
        A = np.asarray(self.adjacency, dtype=float)
        object.__setattr__(self, "baselines", mu)
        object.__setattr__(self, "adjacency", A)
        if A.shape != (mu.size, mu.size):
            raise ConfigError(f"adjacency must be {mu.size}x{mu.size}, got {A.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(A))):
            raise ConfigError("Hawkes parameters must be finite")
        if np.any(mu < 0) or np.any(A < 0):
            raise ConfigError("Hawkes baselines and adjacency must be nonnegative")
        if not self.decay > 0:
            raise ConfigError(f"decay must be > 0, got {self.decay}")
        if A.size and np.max(np.abs(np.linalg.eigvals(A))) >= 1:
            raise ConfigError("adjacency spectral radius must be < 1 for a stable process")

    @property
    def n_drugs(self) -> int:
        return self.baselines.size

    def expected_counts(self) -> np.ndarray:
        """Stationary mean counts over the horizon, ``(I - A)^{-1} mu T``."""
        d = self.n_drugs
        return np.linalg.solve(np.eye(d) - self.adjacency, self.baselines) * self.horizon


@dataclass(frozen=True, eq=False)
class RiskProfile:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ConfigError(f"risk profile {self.kind!r} must be positive and finite")
        if self.kind == "null":
            if np.any(v != 1.0):
                raise ConfigError("null risk profile must be identically 1")
        elif not 1.5 <= v.max() <= 2.0:
            raise ConfigError(
                f"risk profile {self.kind!r} peaks at {v.max():.3f}; expected a maximum in [1.5, 2] "
                "(risk window too short for this shape?)"
            )

    @property
    def window_length(self) -> int:
        return self.values.size - 1


def sinusoid_baseline(n_intervals: int) -> np.ndarray:
    t = np.arange(n_intervals, dtype=float)
    return 8.0 * np.sin(0.01 * t) + 9.0


@dataclass(frozen=True, eq=False)
class SimScenario:
    """Everything needed to draw one synthetic cohort.

    ``hawkes=None`` samples a fresh adjacency (with ``n_offdiag`` nonzero
    off-diagonal entries) on every call; ``individual_effects`` multiplies each
    patient's intensities by a constant, which the case-series likelihood must
    ignore.
    """

    profiles: tuple
    n_patients: int
    n_intervals: int = 750
    window_length: int = 50
    n_offdiag: int = 0
    hawkes: HawkesConfig | None = None
    mu_max: float = 5e-3
    entry_max: float = 5e-3
    singular_value: float = 0.1
    decay: float = 0.5
    window_end_rate: float = 1.0 / 250.0
    window_end_offset: float | None = None
    baseline_values: np.ndarray | None = None
    individual_effects: np.ndarray | None = None
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if self.window_length < 1 or self.window_length >= self.n_intervals:
            raise ConfigError(f"window_length must be in [1, n_intervals), got {self.window_length}")
        for kind in self.profiles:
            if kind not in PROFILE_KINDS:
                raise ConfigError(f"unknown risk profile kind {kind!r}")
        d = len(self.profiles)
        if not 0 <= self.n_offdiag <= d * (d - 1):
            raise ConfigError(f"n_offdiag must be in [0, {d * (d - 1)}], got {self.n_offdiag}")
        if self.hawkes is not None and self.hawkes.n_drugs != d:
            raise ConfigError("hawkes config and profiles disagree on the number of drugs")
        if self.baseline_values is not None:
            b = np.asarray(self.baseline_values, dtype=float)
            if b.shape != (self.n_intervals,) or np.any(b <= 0):
                raise ConfigError("baseline_values must be positive with one value per interval")
        if self.individual_effects is not None:
            e = np.asarray(self.individual_effects, dtype=float)
            if e.shape != (self.n_patients,) or np.any(e <= 0):
                raise ConfigError("individual_effects must be positive with one value per patient")

    @property
    def n_drugs(self) -> int:
        return len(self.profiles)

    def baseline(self) -> np.ndarray:
        if self.baseline_values is not None:
            return np.asarray(self.baseline_values, dtype=float)
        return sinusoid_baseline(self.n_intervals)

    def risk_profiles(self) -> list:
        return [make_risk_profile(kind, self.window_length) for kind in self.profiles]

    def replace(self, **changes) -> "SimScenario":
        return replace(self, **changes)


@dataclass(eq=False)
class GroundTruth:
    """Truth the metrics compare against."""

    profiles: np.ndarray
    baseline: np.ndarray
    hawkes: HawkesConfig
    intensities: list = field(default_factory=list, repr=False)


def sample_adjacency(d: int, q: int, rng, mu_max: float = 5e-3, entry_max: float = 5e-3,
                     singular_value: float = 0.1, decay: float = 0.5, horizon: float = 750.0) -> HawkesConfig:
    """Random sparse Hawkes configuration.

    Baselines ``mu_j ~ U[0, mu_max]`` also fill the diagonal of the adjacency;
    ``q`` off-diagonal entries drawn uniformly from ``U[0, entry_max]``; the
    matrix is finally rescaled to the requested largest singular value.
    """
    if not 0 <= q <= d * (d - 1):
        raise ConfigError(f"q must be in [0, {d * (d - 1)}], got {q}")
    rng = np.random.default_rng(rng)
    mu = rng.uniform(0.0, mu_max, size=d)
    A = np.diag(mu)
    off = [(a, b) for a in range(d) for b in range(d) if a != b]
    if q:
        chosen = rng.choice(len(off), size=q, replace=False)
        vals = rng.uniform(0.0, entry_max, size=q)
        for idx, val in zip(chosen, vals):
            A[off[idx]] = val
    s = np.linalg.norm(A, 2) if d else 0.0
    if s > 0:
        A = A * (singular_value / s)
    return HawkesConfig(mu, A, decay, horizon)


def simulate_hawkes(config: HawkesConfig, rng) -> list:
    """Event times per drug on ``[0, horizon)`` by Ogata thinning.

    Between events every intensity decays, so the total intensity right after
    the current time bounds the process until the next candidate.
    """
    rng = np.random.default_rng(rng)
    mu, A, alpha = config.baselines, config.adjacency, config.decay
    d = mu.size
    events = [[] for _ in range(d)]
    excitation = np.zeros(d)
    t = 0.0
    while True:
        bound = float(np.sum(mu + A @ excitation))
        if bound <= 0:
            break
        dt = rng.exponential(1.0 / bound)
        t += dt
        if t >= config.horizon:
            break
        excitation *= np.exp(-alpha * dt)
        lam = mu + A @ excitation
        cum = np.cumsum(lam)
        assert cum[-1] <= bound * (1 + 1e-12), "thinning bound violated"
        u = rng.uniform(0.0, bound)
        if u < cum[-1]:
            j = min(int(np.searchsorted(cum, u, side="right")), d - 1)
            events[j].append(t)
            excitation[j] += alpha
    return [np.array(e) for e in events]


def exposures_from_events(event_times, grid: IntervalGrid) -> tuple:
    """First purchase of each drug, as an interval index (or no exposure)."""
    out = []
    for times in event_times:
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        k = min(grid.interval_of(float(times.min())), grid.n_intervals - 1)
        out.append(np.array([k], dtype=np.int64))
    return tuple(out)


def make_risk_profile(kind: str, p: int = 50) -> RiskProfile:
    """Relative-incidence curve over lags ``0..p`` for a named shape."""
    if p < 1:
        raise ConfigError(f"risk window must be >= 1, got {p}")
    k = np.arange(p + 1, dtype=float)
    if kind == "null":
        v = np.ones(p + 1)
    elif kind == "constant":
        v = np.full(p + 1, 1.5)
    elif kind == "early_decreasing":
        v = 1 + 0.8 * np.exp(-k / 8)
    elif kind == "slow_decreasing":
        v = 1 + 0.8 * (1 - k / p)
    elif kind == "unimodal":
        v = 1 + 0.8 * np.exp(-((k - p / 2) ** 2) / (2 * (p / 8) ** 2))
    elif kind == "rapid_drop":
        v = np.where(k <= 5, 1.8, 1.0)
    elif kind in ("intermediate", "late", "delayed"):
        k0 = {"intermediate": p / 4, "late": p / 2, "delayed": 3 * p / 4}[kind]
        v = 1 + 0.8 / (1 + np.exp(-(k - k0) / 3))
    else:
        raise ConfigError(f"unknown risk profile kind {kind!r}")
    return RiskProfile(kind, v)


def _profile_matrix(profiles) -> np.ndarray:
    return np.array([pr.values if isinstance(pr, RiskProfile) else np.asarray(pr, float) for pr in profiles])


def compute_intensities(scenario: SimScenario, exposures, windows, individual_effects=None) -> list:
    """Per-patient outcome intensities over the whole grid.

    ``exposures[i][j]`` are patient ``i``'s exposure starts to drug ``j`` and
    ``windows[i] = (a_i, b_i)``; intensities vanish outside intervals
    ``a_i .. b_i - 1``.
    """
    profiles = _profile_matrix(scenario.risk_profiles())
    p = profiles.shape[1] - 1
    base = scenario.baseline()
    K = base.size
    if individual_effects is None:
        individual_effects = scenario.individual_effects
    out = []
    for i, (expo, (a_i, b_i)) in enumerate(zip(exposures, windows)):
        lam = base.copy()
        for j, starts in enumerate(expo):
            for c in starts:
                c = int(c)
                hi = min(c + p, K - 1)
                if hi >= c:
                    lam[c:hi + 1] *= profiles[j, : hi - c + 1]
        if individual_effects is not None:
            lam *= float(individual_effects[i])
        lam[:a_i] = 0.0
        lam[b_i:] = 0.0
        out.append(lam)
    return out


def outcome_probabilities(intensity: np.ndarray) -> np.ndarray:
    lam = np.asarray(intensity, dtype=float)
    total = lam.sum()
    if not total > 0:
        raise DomainError("intensity vector is identically zero")
    return lam / total


def simulate_outcomes(intensities, rng) -> np.ndarray:
    """One outcome interval per patient from ``Mult(1; lambda / sum lambda)``."""
    rng = np.random.default_rng(rng)
    out = np.empty(len(intensities), dtype=np.int64)
    for i, lam in enumerate(intensities):
        out[i] = _draw(outcome_probabilities(lam), rng)
    return out


def _draw(p: np.ndarray, rng) -> int:
    cum = np.cumsum(p)
    k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    k = min(k, p.size - 1)
    while p[k] == 0:
        k -= 1
    return k


def _window_ends(scenario: SimScenario, rng) -> np.ndarray:
    B = scenario.window_end_offset if scenario.window_end_offset is not None else scenario.n_intervals
    e = rng.exponential(1.0 / scenario.window_end_rate, size=scenario.n_patients)
    return np.clip(np.floor(B - e), 1, scenario.n_intervals).astype(np.int64)


def simulate_cohort(scenario: SimScenario) -> tuple[CohortTimeline, GroundTruth]:
    """Draw a case-only cohort and its ground truth.

    One adjacency matrix is shared by the whole population.  Every patient has
    a window ``(0, b_i]``, first-purchase exposures and exactly one outcome.
    """
    master = np.random.SeedSequence(scenario.rng_seed)
    adj_seed, win_seed, patient_root = master.spawn(3)
    hawkes = scenario.hawkes
    if hawkes is None:
        hawkes = sample_adjacency(
            scenario.n_drugs, scenario.n_offdiag, np.random.default_rng(adj_seed),
            mu_max=scenario.mu_max, entry_max=scenario.entry_max,
            singular_value=scenario.singular_value, decay=scenario.decay,
            horizon=float(scenario.n_intervals),
        )
    grid = IntervalGrid(scenario.n_intervals)
    ends = _window_ends(scenario, np.random.default_rng(win_seed))
    patient_seeds = patient_root.spawn(scenario.n_patients)

    exposures, windows, rngs = [], [], []
    for i in range(scenario.n_patients):
        rng = np.random.default_rng(patient_seeds[i])
        exposures.append(exposures_from_events(simulate_hawkes(hawkes, rng), grid))
        windows.append((0, int(ends[i])))
        rngs.append(rng)
    intensities = compute_intensities(scenario, exposures, windows)

    patients = []
    width = len(str(max(scenario.n_patients - 1, 0)))
    for i in range(scenario.n_patients):
        k = _draw(outcome_probabilities(intensities[i]), rngs[i])
        patients.append(PatientTimeline(
            f"p{i:0{width}d}", 0, int(ends[i]),
            np.array([k], dtype=np.int64), np.array([1], dtype=np.int64), exposures[i],
        ))
    labels = tuple(f"drug{j}_{kind}" for j, kind in enumerate(scenario.profiles))
    cohort = CohortTimeline(grid, tuple(patients), labels)
    truth = GroundTruth(
        _profile_matrix(scenario.risk_profiles()), normalize_baseline(scenario.baseline()),
        hawkes, intensities,
    )
    return cohort, truth


PRESETS = {
    "set1": dict(profiles=SET1_PROFILES, n_offdiag=8, n_intervals=750, window_length=50, n_patients=4000),
    "set2": dict(profiles=SET2_PROFILES, n_offdiag=24, n_intervals=750, window_length=50, n_patients=4000),
    # monthly grid over four years, 24 monthly lags, frequent purchases
    "lookalike": dict(profiles=LOOKALIKE_PROFILES, n_offdiag=6, n_intervals=48, window_length=23,
                      n_patients=1800, mu_max=0.05, entry_max=0.05, window_end_rate=1.0 / 12.0),
}


def scenario_from_config(cfg: dict) -> SimScenario:
    """Build a scenario from parsed key-value configuration.

    ``preset`` (``set1``, ``set2``, ``lookalike``) supplies defaults; explicit
    keys override them.  ``n_drugs``, when given, must match ``profiles``.
    """
    cfg = dict(cfg)
    preset = cfg.pop("preset", None)
    params = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        params.update(PRESETS[preset])
    aliases = {"seed": "rng_seed", "q": "n_offdiag", "m": "n_patients", "K": "n_intervals", "p": "window_length"}
    n_drugs = cfg.pop("n_drugs", None)
    for key, value in cfg.items():
        key = aliases.get(key, key)
        if key == "profiles":
            value = tuple(v.strip() for v in str(value).split(",") if v.strip())
        elif key in ("n_patients", "n_intervals", "window_length", "n_offdiag", "rng_seed"):
            value = int(value)
        elif key in ("mu_max", "entry_max", "singular_value", "decay", "window_end_rate", "window_end_offset"):
            value = float(value)
        else:
            raise ConfigError(f"unknown scenario key {key!r}")
        params[key] = value
    for key in ("profiles", "n_patients"):
        if key not in params:
            raise ConfigError(f"missing required scenario key {key!r}")
    if n_drugs is not None and int(n_drugs) != len(params["profiles"]):
        raise ConfigError(f"n_drugs={n_drugs} but {len(params['profiles'])} profiles listed")
    return SimScenario(**params)
