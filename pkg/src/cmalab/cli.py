"""Command line entry point: ``cmalab <subcommand> --config FILE ...``.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 an acceptance threshold was not met.
"""
import sys
from pathlib import Path

import click

from . import mage
from .config import load_config, validate_config
from .errors import CmaError, ConfigError
from .estimates import estimate_report
from .harness import json_text, make_report, run_scenario, sweep
from .lattice import metric_from_potential
from .scenarios import estimate_options, problem_from_config
from .solver import Solution, solve_ma

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_THRESHOLD = 0, 2, 3, 4


def _load(path, resolution):
    cfg = load_config(path)
    if resolution is not None:
        cfg = cfg.with_resolution(resolution)
    return cfg


def _fail(code, message):
    click.echo(message, err=True)
    sys.exit(code)


def _outcome(results):
    """Exit code for a list of ScenarioResults."""
    if any(r.failures for r in results):
        return EXIT_SOLVER
    if not all(r.passed for r in results):
        return EXIT_THRESHOLD
    return EXIT_OK


def _print_checks(res):
    for key, ok in sorted(res.summary.get("checks", {}).items()):
        click.echo(f"  {'PASS' if ok else 'FAIL'} {key}")
    for f in res.failures:
        click.echo(f"  FAILED {res.parameter}={f['param']}: {f['kind']}: {f['message']}")


config_opt = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                          help="YAML or JSON experiment file.")
resolution_opt = click.option("--resolution-override", "resolution", type=int, default=None,
                              help="Replace grid.resolution with this value.")


@click.group()
def main():
    """Finite-difference complex Monge-Ampere experiments on flat tori."""


@main.command("validate-config")
@click.option("--config", "configs", required=True, multiple=True, type=click.Path(dir_okay=False))
def validate_config_cmd(configs):
    """Check configuration files without solving anything."""
    bad = 0
    for path in configs:
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            click.echo(f"{path}: invalid: {exc}", err=True)
            bad += 1
            continue
        click.echo(f"{path}: ok ({cfg.scenario}, n={cfg.n}, {cfg.mode.value})")
    sys.exit(EXIT_CONFIG if bad else EXIT_OK)


@main.command()
@config_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
@resolution_opt
def solve(config, out, resolution):
    """Solve the first schedule member and write a checkpoint."""
    try:
        cfg = _load(config, resolution)
        spec = problem_from_config(cfg)
        params = cfg.solve_params()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, f"config error: {exc}")
    try:
        sol = solve_ma(spec, params)
    except CmaError as exc:
        _fail(EXIT_SOLVER, f"solver failure: {type(exc).__name__}: {exc}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mage.save_checkpoint(out / "phi.mage", sol)
    (out / "config.json").write_text(json_text(cfg.raw))
    info = {"t": sol.t, "c_t": sol.c_t, "residual_sup": sol.residual_sup, "iterations": sol.newton_iters,
            "seconds": sol.diagnostics.get("seconds")}
    (out / "solution.json").write_text(json_text(info))
    click.echo(f"converged in {sol.newton_iters} Newton steps, residual {sol.residual_sup:.2e}, c_t {sol.c_t:.12g}")


@main.command("sweep")
@click.option("--config", "configs", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--parallel", type=int, default=None, help="Worker processes (default: from config).")
@click.option("--dump-fields", is_flag=True, help="Write MAGE1 potentials per member.")
@resolution_opt
def sweep_cmd(configs, out, parallel, dump_fields, resolution):
    """Run one or more scenario configurations."""
    try:
        cfgs = [_load(p, resolution) for p in configs]
    except ConfigError as exc:
        _fail(EXIT_CONFIG, f"config error: {exc}")
    results = sweep(cfgs, parallel, out, dump_fields)
    for res in results:
        click.echo(f"{res.config.name}: {len(res.rows)} rows, {len(res.failures)} failures")
        _print_checks(res)
    sys.exit(_outcome(results))


@main.command()
@config_opt
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True,
              help="Potential written by 'solve'.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@resolution_opt
def estimate(config, checkpoint, out, resolution):
    """Geometric estimates of a stored solution."""
    try:
        cfg = _load(config, resolution)
        spec = problem_from_config(cfg)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, f"config error: {exc}")
    try:
        phi, meta = mage.load_checkpoint(checkpoint)
        spec.grid.check_same(phi.grid)
        spec = spec.replace(t=float(meta["t"]))
        omega = metric_from_potential(spec.chi, spec.t, spec.theta, phi)
    except CmaError as exc:
        _fail(EXIT_SOLVER, f"cannot use checkpoint: {exc}")
    sol = Solution(phi, float(meta["c_t"]), omega, float(meta["residual_sup"]), int(meta["iterations"]),
                   bool(meta.get("converged", True)), spec.t, spec.lam)
    rep = estimate_report(sol, spec, estimate_options(cfg))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimates.json").write_text(rep.to_json())
    for key, value in rep.scalars().items():
        click.echo(f"{key} {value:.6g}")


@main.command()
@config_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
@resolution_opt
def envelope(config, out, resolution):
    """Envelope property checks on the grid of the given configuration."""
    try:
        cfg = _load(config, resolution)
        raw = {"scenario": "EnvelopeSuite", "name": cfg.name, "grid": cfg.raw["grid"]}
        if "envelope" in cfg.raw:
            raw["envelope"] = cfg.raw["envelope"]
        cfg = validate_config(raw)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, f"config error: {exc}")
    res = run_scenario(cfg, 1, out)
    for row in res.rows:
        click.echo(f"{'PASS' if row['passed'] else 'FAIL'} {row['check']} {row['value']:.3e} (tol {row['tolerance']:.1e})")
    for f in res.failures:
        click.echo(f"FAILED: {f['kind']}: {f['message']}")
    sys.exit(_outcome([res]))


@main.command()
@click.option("--in", "results_dir", type=click.Path(file_okay=False, exists=True), required=True,
              help="Directory written by 'sweep'.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def report(results_dir, out):
    """Plot-ready series and empirical bound constants from a sweep."""
    try:
        written = make_report(results_dir, out)
    except (OSError, ValueError) as exc:
        _fail(EXIT_CONFIG, f"cannot build report: {exc}")
    for path in written:
        click.echo(str(path))


if __name__ == "__main__":
    main()
