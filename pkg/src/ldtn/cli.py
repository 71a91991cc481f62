"""Command line front-end.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .collision import ModelParams
from .config import ConfigError, RunConfig, load_config
from .errors import NumericError, ValidationError
from .large_deviations import (
    PhaseDiagram,
    ScgfCurve,
    SolverSettings,
    activity_finite_difference,
    compute_curve,
    rate_function_legendre,
    scan_phase_diagram,
    stationary_activity,
    synthetic_curve,
)
from .trajectories import (
    SampleEnsemble,
    activity_histogram,
    central_sites,
    read_ensemble,
    record_seeds,
    sample_records,
    string_correlator,
    write_ensemble,
)
from .validation import run_validation

log = logging.getLogger("ldtn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 1, 2, 3


# ---------------------------------------------------------------------- output


class Writer:
    """Single writer for one run; every file carries the config hash and version."""

    def __init__(self, out: Path, cfg: RunConfig, command: str):
        self.out = Path(out)
        self.cfg = cfg
        self.command = command
        self.files: list[str] = []
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.cfg.hash(), "version": __version__}

    def csv(self, name: str, columns: list[str], rows) -> Path:
        path = self.out / name
        with path.open("w", newline="") as fh:
            fh.write(f"# config_hash={self.cfg.hash()} version={__version__}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow(["" if _missing(x) else _fmt(x) for x in row])
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps({**self.stamp, **payload}, indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def manifest(self, status: str) -> Path:
        payload = {
            **self.stamp,
            "command": self.command,
            "status": status,
            "files": self.files,
            "config": self.cfg.canonical_text().splitlines(),
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        path = self.out / "run_manifest.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def _missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _vtag(v: float) -> str:
    return f"{v:g}"


def write_curve(writer: Writer, curve: ScgfCurve) -> None:
    p = curve.params
    tag = f"L{p.L}_V{_vtag(p.v)}"
    writer.csv(
        f"scgf_{tag}.csv",
        ["s", "theta", "activity", "d_max", "iterations", "trunc_err", "error_bar"],
        [
            (q.s, q.theta, q.activity, q.d_max, q.iterations, q.truncation_error_last_step, q.error_bar)
            for q in curve.points
        ],
    )
    if curve.points and not np.any(np.isnan(curve.activity)):
        rate = rate_function_legendre(curve)
        writer.csv(f"rate_{tag}.csv", ["a", "phi"], [(a, f) for a, f in rate.grid if f is not None])
    else:
        log.warning("no rate function for %s: activities incomplete", tag)


def _finish_curve(curve: ScgfCurve) -> ScgfCurve:
    if len(curve.points) >= 3:
        curve = activity_finite_difference(curve)
    return curve


def _scan_job(args):
    p, s_grid, settings, hf = args
    curve = compute_curve(p, s_grid, settings, hellmann_feynman=hf, skip_failures=True)
    return _finish_curve(curve)


# -------------------------------------------------------------------- commands


def cmd_scgf_scan(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    writer = Writer(out, cfg, "scgf-scan")
    s_grid = list(cfg["grids.s"])
    if not s_grid:
        raise ConfigError("grids.s must be non-empty")
    settings = cfg.solver()
    tasks = [
        (cfg.model(L, v), s_grid, settings, cfg["solver.hellmann_feynman"])
        for v in cfg.v_list
        for L in cfg.L_list
    ]
    curves = _run_jobs(_scan_job, tasks, jobs)
    status = EXIT_OK
    for curve in curves:
        if len(curve.points) < len(s_grid):
            status = EXIT_NUMERIC
        if any(not q.converged for q in curve.points):
            log.warning("L=%d V=%g: some points did not converge", curve.params.L, curve.params.v)
        write_curve(writer, curve)
    writer.manifest("ok" if status == EXIT_OK else "partial")
    return status


def _synthetic_fn(cfg: RunConfig):
    a0, c, d = cfg["synthetic.a0"], cfg["synthetic.c"], cfg["synthetic.d"]

    def fn(p: ModelParams, s_grid, settings: SolverSettings) -> ScgfCurve:
        return synthetic_curve(p, s_grid, a0, c, d)

    return fn


def cmd_phase_diagram(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    writer = Writer(out, cfg, "phase-diagram")
    s_grid = list(cfg["grids.s"])
    if not s_grid:
        raise ConfigError("grids.s must be non-empty")
    omega = cfg["model.omega"]
    ratios = cfg["grids.v_over_omega"]
    if not ratios:
        if omega == 0:
            raise ConfigError("phase diagram needs model.omega != 0")
        ratios = (cfg["model.v"] / omega,)
    curve_fn = _synthetic_fn(cfg) if cfg["synthetic.enabled"] else None
    diagram: PhaseDiagram = scan_phase_diagram(
        cfg.model(), ratios, s_grid, cfg.L_list, cfg.solver(), jobs=jobs, curve_fn=curve_fn
    )
    for key in sorted(diagram.curves):
        write_curve(writer, diagram.curves[key])
    writer.csv(
        "activity_grid.csv", ["L", "v_over_omega", "s", "theta", "activity"], diagram.activity_table()
    )
    estimates = []
    for ratio in sorted(diagram.s_star):
        est = diagram.s_star[ratio]
        estimates.append(
            {
                "v_over_omega": ratio,
                "per_L": [{"L": L, "s_cross": sc} for L, sc in est.per_L],
                "s_star": est.s_star,
                "uncertainty": est.uncertainty,
                "diagnostics": list(est.diagnostics),
            }
        )
    failures = [
        {"L": L, "v_over_omega": r, "error": msg} for (L, r), msg in sorted(diagram.failures.items())
    ]
    writer.json("s_star.json", {"estimates": estimates, "failures": failures})
    writer.manifest("ok" if not failures else "partial")
    return EXIT_NUMERIC if failures else EXIT_OK


def _sample_chunk(args):
    return sample_records(*args)


def _sample(cfg: RunConfig, jobs: int) -> SampleEnsemble:
    p = cfg.model()
    seed = cfg["sampling.seed"]
    seeds = record_seeds(seed, cfg["sampling.n_samples"])
    d_max, cutoff = cfg["solver.d_max"], cfg["solver.cutoff"]
    T = cfg["sampling.T"]
    n_chunks = max(1, min(jobs, len(seeds)))
    bounds = np.linspace(0, len(seeds), n_chunks + 1).astype(int)
    tasks = [(p, None, T, seeds[a:b], d_max, cutoff) for a, b in zip(bounds, bounds[1:])]
    records = [r for chunk in _run_jobs(_sample_chunk, tasks, jobs) for r in chunk]
    return SampleEnsemble(tuple(records), p, seed)


def summarize_ensemble(cfg: RunConfig, ensemble: SampleEnsemble) -> dict:
    T, L = ensemble.records[0].outcomes.shape
    acts = ensemble.activities
    n = len(acts)
    centers, density = activity_histogram(ensemble, cfg["sampling.bins"])
    sites = cfg["sampling.sites"] or tuple(sorted(set(central_sites(L))))
    max_len = cfg["sampling.max_len"] or T
    correlators = []
    for site in sites:
        c = string_correlator(ensemble, site, max_len)
        correlators.append(
            {"site": site, "ell": c.lengths.tolist(), "C": c.values.tolist(), "stderr": c.stderr.tolist()}
        )
    c = string_correlator(ensemble, sites[0], max_len)
    return {
        "L": L,
        "T": T,
        "n_samples": n,
        "seed": ensemble.seed,
        "mean_activity": float(acts.mean()),
        "mean_activity_stderr": float(acts.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        "stationary_activity": stationary_activity(
            ensemble.params, cfg["solver.d_max"], cfg["solver.cutoff"]
        ),
        "histogram": {"a": centers.tolist(), "p": density.tolist()},
        "string_correlator": correlators,
        "string_correlator_central": {
            "sites": list(central_sites(L)),
            "ell": c.lengths.tolist(),
            "C": c.central_values.tolist(),
            "stderr": c.central_stderr.tolist(),
        },
    }


def cmd_sample(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    writer = Writer(out, cfg, "sample")
    ensemble = _sample(cfg, jobs)
    write_ensemble(ensemble, writer.out / "trajectories", writer.stamp)
    writer.files.append("trajectories/manifest.json")
    writer.json("sample_summary.json", summarize_ensemble(cfg, ensemble))
    writer.manifest("ok")
    return EXIT_OK


def cmd_correlator(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    """Summaries of an existing ensemble in ``out``; samples one if absent."""
    traj = Path(out) / "trajectories"
    if not (traj / "manifest.json").exists():
        return cmd_sample(cfg, out, jobs)
    writer = Writer(out, cfg, "correlator")
    ensemble = read_ensemble(traj)
    writer.json("sample_summary.json", summarize_ensemble(cfg, ensemble))
    writer.manifest("ok")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    writer = Writer(out, cfg, "validate")

    def report(result):
        print(result.line(), flush=True)

    results = run_validation(cfg.model(), cfg["validate.L"], cfg["validate.s"], report)
    ok = all(r.passed for r in results)
    writer.json(
        "validate_report.json",
        {
            "passed": ok,
            "checks": [
                {
                    "name": r.name,
                    "max_deviation": r.deviation if math.isfinite(r.deviation) else None,
                    "tolerance": r.tolerance,
                    "passed": r.passed,
                    "detail": r.detail,
                }
                for r in results
            ],
        },
    )
    writer.manifest("ok" if ok else "failed")
    print("all checks passed" if ok else "validation FAILED")
    return EXIT_OK if ok else EXIT_VALIDATION


def _run_jobs(fn, tasks, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


COMMANDS = {
    "scgf-scan": cmd_scgf_scan,
    "phase-diagram": cmd_phase_diagram,
    "sample": cmd_sample,
    "correlator": cmd_correlator,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldtn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="sampling seed (u64)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides({"sampling.seed": args.seed})
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = args.out if args.out is not None else Path(cfg["output.directory"])
        return COMMANDS[args.command](cfg, out, args.jobs)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
