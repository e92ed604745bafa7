"""Command-line entry point: ``emqm <subcommand>``."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import numpy as np

from . import harness
from .circuit import init_state
from .hamiltonian import map_hamiltonian, validate_local_term
from .mixing import mixing_report, one_design_residual


def _config(config_path, **overrides) -> harness.RunConfig:
    text = Path(config_path).read_text() if config_path else ""
    return harness.RunConfig.from_text(text, **overrides)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="key = value configuration file")
seed_option = click.option("--seed", type=int, default=None, help="base RNG seed")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Emergent quantum mechanics circuit simulator and analysis tools."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@config_option
@seed_option
@out_option
@click.option("--mode", type=click.Choice(["exact", "fast"]), default=None)
@click.option("--n", type=int, default=None)
@click.option("--epsilon0", type=float, default=None)
@click.option("--realizations", type=int, default=None)
@click.option("--t-max", type=float, default=None)
def simulate(config_path, seed, out, mode, n, epsilon0, realizations, t_max):
    """Run an exact or fast experiment and write deviation.csv and components.csv."""
    cfg = _config(config_path, seed=seed, mode=mode, n=n, epsilon0=epsilon0, realizations=realizations, t_max=t_max)
    out = out or "emqm-out"
    res = harness.run_experiment(cfg, out)
    click.echo(f"wrote {out}/deviation.csv ({res.series.t.size} times, {cfg.realizations} realizations)")


@main.command()
@config_option
@out_option
@click.option("--n", type=int, default=None)
@click.option("--epsilon0", type=float, default=None)
def predict(config_path, out, n, epsilon0):
    """Write the analytic deviation components without simulating."""
    cfg = _config(config_path, n=n, epsilon0=epsilon0)
    params = cfg.params()
    times = cfg.times()
    pred = harness.predict_errors(params, times, calibration=cfg.calibration)
    rows = zip(times, pred.eps_m, pred.eps_t, pred.eps_S, pred.eps_stat, pred.eps_delay, pred.total,
               harness.err_curve(cfg.epsilon0, times))
    header = ("t", "eps_m", "eps_t", "eps_S", "eps_stat", "eps_delay", "eps_predicted", "eps_err_curve")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        harness._write_csv(Path(out) / "components.csv", header, rows)
        click.echo(f"wrote {out}/components.csv")
    else:
        click.echo(",".join(header))
        for row in rows:
            click.echo(",".join(harness._fmt(v) for v in row))
    click.echo(f"# v_fast = {pred.v_fast:.9g}", err=True)


@main.command("analyze-w")
@config_option
@seed_option
@out_option
@click.option("--n", type=int, default=None)
@click.option("--S", "S", type=int, default=None)
@click.option("--trials", type=int, default=200, show_default=True, help="samples for the 1-design residual")
def analyze_w(config_path, seed, out, n, S, trials):
    """Spectral statistics of the mixing operator W."""
    cfg = _config(config_path, seed=seed, n=n, S=S)
    params = cfg.params()
    state = init_state(params, cfg.load_spec())
    rng = np.random.default_rng(cfg.seed)
    resid = one_design_residual(cfg.n, min(params.S, 64), trials, rng)
    rep = mixing_report(state, design_residual=resid)
    click.echo(rep.to_table())
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "mixing.csv").write_text(rep.to_csv())


@main.command("map-hamiltonian")
@click.argument("matrix_json", type=click.Path(exists=True, dir_okay=False))
@out_option
def map_hamiltonian_cmd(matrix_json, out):
    """Map a complex Hermitian two-qubit term (JSON [[re, im], ...] rows) to a real zero-sum generator."""
    raw = np.array(json.loads(Path(matrix_json).read_text()), dtype=float)
    h = raw[..., 0] + 1j * raw[..., 1]
    g = map_hamiltonian(h)
    report = validate_local_term(g)
    click.echo(f"mapped {h.shape[0]}x{h.shape[0]} term to {g.shape[0]}x{g.shape[0]} generator; valid={report.passed}")
    text = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in g) + "\n"
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "generator.txt").write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("cpu-estimate")
@config_option
@click.option("--n", type=int, default=None)
@click.option("--epsilon0", type=float, default=None)
@click.option("--t", "t", type=float, default=None, help="emergent time (default t_max)")
def cpu_estimate_cmd(config_path, n, epsilon0, t):
    """Raw step and work counts needed to reach time t."""
    cfg = _config(config_path, n=n, epsilon0=epsilon0)
    params = cfg.params()
    t = cfg.t_max if t is None else t
    est = harness.cpu_estimate(params, t, cfg.epsilon_j, cfg.epsilon0)
    click.echo(f"n={params.n} S={params.S} delta_t={params.delta_t:.9g} m0={params.m0:.9g} "
               f"delta_m={params.delta_m:.9g} Delta_t={params.Delta_t:.9g}")
    for k, v in est.items():
        click.echo(f"{k} = {v:.9g}")


if __name__ == "__main__":
    main()
