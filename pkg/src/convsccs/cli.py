"""Command-line entry point: ``convsccs simulate | fit | benchmark``.

Exit codes: 0 on success, 1 on configuration, validation or I/O errors, 2 on
numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import fit_settings, load_config
from .errors import ConvSCCSError, DivergenceError, ValidationError
from .estimator import relative_incidence, run_pipeline, write_cv_table, write_report
from .metrics import evaluate
from .simulator import PRESETS, SimScenario, scenario_from_config, simulate_cohort
from .timeline import IntervalGrid, enforce_exposure_gaps, read_event_file, validate_cases, write_event_file

logger = logging.getLogger("convsccs")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, argv, configs: dict, seeds: dict,
                   timings: dict, settings: dict | None = None, inputs=()) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_paths": {k: str(v) for k, v in configs.items() if v is not None},
        "seeds": seeds,
        "output_dir": str(out_dir),
        "version": __version__,
        "timings": {k: round(v, 4) for k, v in timings.items()},
        "settings": settings or {},
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    path = out_dir / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_scenario(source: str | None, seed: int | None, section: dict | None = None) -> tuple:
    """Scenario from a preset name, a config file, or a ``[scenario]`` section."""
    if section is not None:
        cfg = dict(section)
        path = None
    elif source in PRESETS:
        cfg = {"preset": source}
        path = None
    elif source is not None:
        path = source
        sections = load_config(source)
        cfg = dict(sections.get("scenario", sections.get("", {})))
    else:
        raise _UsageError("--scenario is required")
    if seed is not None:
        cfg.pop("seed", None)
        cfg["rng_seed"] = str(seed)
    return scenario_from_config(cfg), path


class _UsageError(ConvSCCSError):
    pass


def write_truth(truth, labels, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("drug", "lag", "rel_incidence"))
        for lab, curve in zip(labels, truth.profiles):
            for k, v in enumerate(curve):
                w.writerow((lab, k, format(float(v), ".10g")))
        for k, v in enumerate(truth.baseline):
            w.writerow(("baseline", k, format(float(v), ".10g")))


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    scenario, path = _load_scenario(args.scenario, args.seed)
    cohort, truth = simulate_cohort(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_event_file(cohort, out / "cohort.csv")
    write_truth(truth, cohort.drug_labels, out / "truth.csv")
    write_manifest(out, "simulate", args.argv, {"scenario": path}, {"scenario": scenario.rng_seed},
                   {"total": time.perf_counter() - t0},
                   {"n_patients": scenario.n_patients, "profiles": list(scenario.profiles),
                    "n_intervals": scenario.n_intervals, "window_length": scenario.window_length})
    print(f"wrote {cohort.n_patients} patients, {cohort.n_drugs} drugs to {out}")
    return 0


def plot_curves(result, labels, out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    params = result.reported_params
    curves, _ = relative_incidence(params, result.design)
    G, L = params.n_baseline_groups, params.n_lags
    paths = []
    lags = np.arange(L)
    for j, lab in enumerate(labels):
        fig, ax = plt.subplots(figsize=(5, 3))
        if result.ci_lower is not None:
            sl = slice(G + j * L, G + (j + 1) * L)
            ax.fill_between(lags, result.ci_lower[sl], result.ci_upper[sl], step="mid", alpha=0.3, lw=0)
        ax.step(lags, curves[j], where="mid")
        ax.axhline(1.0, color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("lag")
        ax.set_ylabel("relative incidence")
        ax.set_title(lab)
        fig.tight_layout()
        path = out_dir / f"ri_{j:02d}.svg"
        # fixed metadata keeps the files byte-stable
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_fit(args) -> int:
    if args.cohort is None:
        raise _UsageError("--cohort is required")
    sections = load_config(args.config) if args.config else {"": {}}
    settings = fit_settings(sections.get("fit", sections.get("", {})), seed=args.seed)
    if args.no_bootstrap:
        settings.n_bootstrap = 0
    timings = {}
    t0 = time.perf_counter()
    grid = IntervalGrid(settings.n_intervals) if settings.n_intervals else None
    cohort = read_event_file(args.cohort, grid)
    cohort, report = validate_cases(cohort) if args.drop_non_cases else (cohort, {})
    non_cases = int(np.sum(cohort.n_events() == 0))
    if non_cases:
        raise ValidationError(f"{non_cases} patients have no outcome event; rerun with --drop-non-cases")
    cohort = enforce_exposure_gaps(cohort, settings.window_length, settings.gap_policy)
    timings["read"] = time.perf_counter() - t0

    result = run_pipeline(
        cohort, settings.window_length, settings.baseline_group_width, settings.search,
        settings.solver, settings.refit, settings.n_bootstrap, settings.confidence,
        settings.bootstrap_seed, n_jobs=args.jobs, timings=timings,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(result, out / "report.csv", cohort.drug_labels)
    write_cv_table(result.cv_table, out / "cv_table.csv")
    if not args.no_plots:
        plot_curves(result, cohort.drug_labels, out)
    chosen = {"gamma_tv": result.chosen_penalty.gamma_tv, "gamma_gl": result.chosen_penalty.gamma_gl}
    write_manifest(out, "fit", args.argv, {"config": args.config, "cohort": args.cohort},
                   {"cv": settings.search.rng_seed, "solver": settings.solver.rng_seed,
                    "bootstrap": settings.bootstrap_seed},
                   timings, {**settings.as_dict(), "chosen_penalty": chosen, **report},
                   inputs=[p for p in (args.cohort, args.config) if p])
    print(f"chosen gamma_tv={chosen['gamma_tv']:.4g} gamma_gl={chosen['gamma_gl']:.4g}; report in {out}")
    return 0


def _replicate_seeds(master: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


def run_replicate(scenario: SimScenario, settings, seed: int) -> dict:
    timings = {}
    t0 = time.perf_counter()
    cohort, truth = simulate_cohort(scenario.replace(rng_seed=seed))
    timings["simulate"] = time.perf_counter() - t0
    cohort = enforce_exposure_gaps(cohort, settings.window_length, settings.gap_policy)
    search = settings.search.replace(rng_seed=seed)
    result = run_pipeline(cohort, settings.window_length, settings.baseline_group_width, search,
                          settings.solver.replace(rng_seed=seed), settings.refit,
                          settings.n_bootstrap, settings.confidence, seed, timings=timings)
    reports = {}
    for name, params in (("penalized", result.params), ("refit", result.refit_params)):
        curves, base = relative_incidence(params, result.design)
        reports[name] = evaluate(curves, truth.profiles, base, truth.baseline)
    n_zero = sum(s.is_zero for s in result.support)
    return {"seed": seed, "reports": reports, "timings": timings, "labels": cohort.drug_labels,
            "n_zero_blocks": n_zero, "penalty": (result.chosen_penalty.gamma_tv, result.chosen_penalty.gamma_gl)}


def quartiles(values) -> tuple:
    q = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75])
    return float(q[0]), float(q[1]), float(q[2])


def cmd_benchmark(args) -> int:
    if args.config is None:
        raise _UsageError("--config is required")
    sections = load_config(args.config)
    study = sections.get("", {})
    n_rep = int(study.get("replicates", 1))
    master = args.seed if args.seed is not None else int(study.get("seed", 0))
    if args.scenario is not None:
        scenario, _ = _load_scenario(args.scenario, None)
    else:
        scenario, _ = _load_scenario(None, None, sections.get("scenario", {"preset": study.get("preset", "set1")}))
    settings = fit_settings(sections.get("fit", {}))
    if args.no_bootstrap:
        settings.n_bootstrap = 0
    seeds = _replicate_seeds(master, n_rep)
    t0 = time.perf_counter()
    if args.jobs > 1 and n_rep > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(lambda s: run_replicate(scenario, settings, s), seeds))
    else:
        rows = [run_replicate(scenario, settings, s) for s in seeds]
    total = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = rows[0]["labels"] if rows else ()
    with open(out / "mae.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("replicate", "seed", "estimate", "metric", "value"))
        for r_id, row in enumerate(rows):
            for name, rep in row["reports"].items():
                for metric, value in rep.rows(list(labels)):
                    w.writerow((r_id, row["seed"], name, metric, format(value, ".10g")))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("estimate", "metric", "q1", "median", "q3"))
        for name in ("penalized", "refit"):
            for metric in ("exposure_mae", "baseline_mae"):
                vals = [getattr(row["reports"][name], metric) for row in rows]
                w.writerow((name, metric, *(format(v, ".10g") for v in quartiles(vals))))
    with open(out / "runtime.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("replicate", "phase", "seconds"))
        for r_id, row in enumerate(rows):
            for phase, sec in row["timings"].items():
                w.writerow((r_id, phase, format(sec, ".4f")))
    write_manifest(out, "benchmark", args.argv, {"config": args.config, "scenario": args.scenario},
                   {"master": master, "replicates": seeds}, {"total": total},
                   {**settings.as_dict(), "replicates": n_rep}, inputs=[args.config])
    med = quartiles([row["reports"]["penalized"].exposure_mae for row in rows])[1] if rows else float("nan")
    print(f"{n_rep} replicates, median exposure MAE {med:.4f}; tables in {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1); 2 is kept for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convsccs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic cohort")
    sim.add_argument("--scenario", required=True, help="preset name (set1, set2, lookalike) or scenario file")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="cross-validate, fit, refit and bootstrap a cohort")
    fit.add_argument("--cohort", required=True, help="event file")
    fit.add_argument("--config", help="fit configuration file")
    fit.add_argument("--out", required=True)
    fit.add_argument("--seed", type=int, help="overrides every seed of the fit configuration")
    fit.add_argument("--jobs", type=int, default=1)
    fit.add_argument("--no-bootstrap", action="store_true")
    fit.add_argument("--drop-non-cases", action="store_true")
    fit.add_argument("--no-plots", action="store_true")
    fit.set_defaults(func=cmd_fit)

    bench = sub.add_parser("benchmark", help="simulate and fit replicates, report MAE and runtimes")
    bench.add_argument("--config", required=True, help="study configuration file")
    bench.add_argument("--scenario", help="overrides the [scenario] section")
    bench.add_argument("--out", required=True)
    bench.add_argument("--seed", type=int, help="master seed")
    bench.add_argument("--jobs", type=int, default=1)
    bench.add_argument("--no-bootstrap", action="store_true")
    bench.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConvSCCSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
