"""Key-value configuration files.

Files hold ``key = value`` lines, ``#`` comments and optional ``[section]``
headers.  Keys before the first header belong to the unnamed section ``""``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError
from .estimator import DEFAULT_REFIT, HyperSearchConfig
from .solver import SolverConfig

_ROOT = "__root__"


def parse_config(text: str) -> dict:
    """Section name -> ``{key: raw string value}``."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + text)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] - 1 if exc.errors else None
        raise ParseError("malformed configuration line", line) from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"duplicate key {exc.option!r}", exc.lineno - 1 if exc.lineno else None) from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"duplicate section {exc.section!r}", exc.lineno - 1 if exc.lineno else None) from None
    out = {}
    for name in parser.sections():
        out["" if name == _ROOT else name] = dict(parser.items(name))
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _num(cfg, key, cast, default):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {cfg[key]!r} as {cast.__name__}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


_bool.__name__ = "bool"


def _pair(s: str) -> tuple:
    parts = [float(x) for x in s.replace(":", ",").split(",") if x.strip()]
    if len(parts) != 2:
        raise ValueError(s)
    return tuple(parts)


_pair.__name__ = "pair"

FIT_KEYS = {
    "window_length", "baseline_group_width", "gap_policy", "n_folds", "search", "n_candidates",
    "gamma_tv_range", "gamma_gl_range", "n_strata", "cv_seed", "gamma_tv", "gamma_gl",
    "step_size", "n_epochs", "tolerance", "solver_seed", "refit_epochs", "refit_tolerance",
    "n_bootstrap", "confidence", "bootstrap_seed", "n_intervals",
}


@dataclass
class FitSettings:
    """Everything the fit pipeline reads from a configuration file.

    ``gamma_tv`` and ``gamma_gl``, when both set, replace the search with that
    single candidate.  ``n_intervals=None`` infers the study grid from the
    largest window end in the event file.
    """

    window_length: int = 50
    baseline_group_width: int = 1
    gap_policy: str = "first_only"
    search: HyperSearchConfig = field(default_factory=HyperSearchConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    refit: SolverConfig = DEFAULT_REFIT
    n_bootstrap: int = 200
    confidence: float = 0.95
    bootstrap_seed: int = 0
    n_intervals: int | None = None

    def as_dict(self) -> dict:
        s, o, r = self.search, self.solver, self.refit
        return {
            "window_length": self.window_length, "baseline_group_width": self.baseline_group_width,
            "gap_policy": self.gap_policy, "n_folds": s.n_folds, "search": s.search,
            "n_candidates": s.n_candidates, "gamma_tv_range": list(s.gamma_tv_range),
            "gamma_gl_range": list(s.gamma_gl_range), "n_strata": s.n_strata, "cv_seed": s.rng_seed,
            "candidates": None if s.candidates is None else [list(c) for c in s.candidates],
            "step_size": o.step_size, "n_epochs": o.n_epochs, "tolerance": o.tolerance,
            "solver_seed": o.rng_seed, "refit_epochs": r.n_epochs, "refit_tolerance": r.tolerance,
            "n_bootstrap": self.n_bootstrap, "confidence": self.confidence,
            "bootstrap_seed": self.bootstrap_seed, "n_intervals": self.n_intervals,
        }


def fit_settings(cfg: dict, seed: int | None = None) -> FitSettings:
    """Build :class:`FitSettings` from one parsed section.

    ``seed``, when given, overrides the CV, solver and bootstrap seeds.
    """
    unknown = set(cfg) - FIT_KEYS
    if unknown:
        raise ConfigError(f"unknown fit key {sorted(unknown)[0]!r}")
    cv_seed = _num(cfg, "cv_seed", int, 0)
    solver_seed = _num(cfg, "solver_seed", int, 0)
    boot_seed = _num(cfg, "bootstrap_seed", int, 0)
    if seed is not None:
        cv_seed = solver_seed = boot_seed = int(seed)
    candidates = None
    if "gamma_tv" in cfg or "gamma_gl" in cfg:
        candidates = ((_num(cfg, "gamma_tv", float, 0.0), _num(cfg, "gamma_gl", float, 0.0)),)
    search = HyperSearchConfig(
        n_folds=_num(cfg, "n_folds", int, 3),
        search=cfg.get("search", "random"),
        n_candidates=_num(cfg, "n_candidates", int, 50),
        gamma_tv_range=_num(cfg, "gamma_tv_range", _pair, (1e-4, 1e1)),
        gamma_gl_range=_num(cfg, "gamma_gl_range", _pair, (1e-4, 1e1)),
        n_strata=_num(cfg, "n_strata", int, 4),
        rng_seed=cv_seed,
        candidates=candidates,
    )
    solver = SolverConfig(
        step_size=_num(cfg, "step_size", float, None),
        n_epochs=_num(cfg, "n_epochs", int, 100),
        tolerance=_num(cfg, "tolerance", float, 1e-6),
        rng_seed=solver_seed,
    )
    refit = DEFAULT_REFIT.replace(
        n_epochs=_num(cfg, "refit_epochs", int, DEFAULT_REFIT.n_epochs),
        tolerance=_num(cfg, "refit_tolerance", float, DEFAULT_REFIT.tolerance),
    )
    policy = cfg.get("gap_policy", "first_only")
    if policy not in ("first_only", "error", "keep"):
        raise ConfigError(f"gap_policy: unknown policy {policy!r}")
    return FitSettings(
        window_length=_num(cfg, "window_length", int, 50),
        baseline_group_width=_num(cfg, "baseline_group_width", int, 1),
        gap_policy=policy,
        search=search, solver=solver, refit=refit,
        n_bootstrap=_num(cfg, "n_bootstrap", int, 200),
        confidence=_num(cfg, "confidence", float, 0.95),
        bootstrap_seed=boot_seed,
        n_intervals=_num(cfg, "n_intervals", int, None),
    )
