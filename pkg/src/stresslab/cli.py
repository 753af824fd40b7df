"""Command-line entry point: ``stresslab run`` and ``stresslab report``.

Exit codes: 0 when a run completes with a failure found (or a report is
written), 2 when a run completes without finding a failure, 1 on any error.
"""

from __future__ import annotations

import sys

import click
import yaml

from .harness import BUDGETS, SOLVERS, ExperimentSpec, report, run

EXIT_OK, EXIT_ERROR, EXIT_NO_FAILURE = 0, 1, 2


@click.group()
def cli():
    """Adaptive stress testing of a pedestrian-crosswalk scenario."""


@cli.command("run")
@click.option("--scenario", default="easy", show_default=True, help="Preset name or YAML config path.")
@click.option("--solver", type=click.Choice(SOLVERS), required=True)
@click.option("--robustify", is_flag=True, help="Run the backwards algorithm on the best failure.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--budget", type=click.Choice(tuple(BUDGETS)), default="desk", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--config", "config_overrides", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML mapping of scenario overrides applied on top of --scenario.")
@click.option("--ge-iterations", type=int, default=None)
@click.option("--ge-batch", type=int, default=None)
@click.option("--ge-granularity", type=float, default=None, help="Bin width in action standard deviations.")
@click.option("--mcts-c", type=float, default=None)
@click.option("--mcts-k", type=float, default=None)
@click.option("--mcts-alpha", type=float, default=None)
@click.option("--ba-epochs-per-step", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--clip", type=float, default=None)
@click.option("--kl-coef", type=float, default=None)
@click.option("--no-timing", is_flag=True, help="Leave wall_ms empty so repeated runs give identical CSVs.")
def run_cmd(scenario, solver, robustify, seed, budget, out_dir, iterations, batch_size, config_overrides,
            ge_iterations, ge_batch, ge_granularity, mcts_c, mcts_k, mcts_alpha, ba_epochs_per_step,
            lr, clip, kl_coef, no_timing):
    """Run one solver on one scenario."""
    overrides = {}
    if config_overrides:
        overrides = yaml.safe_load(open(config_overrides)) or {}
    solver_options = {}
    if solver == "ge":
        iterations = ge_iterations or iterations
        batch_size = ge_batch or batch_size
        if ge_granularity is not None:
            from .crosswalk import load_scenario

            std = load_scenario(scenario, overrides or None).action_model.std
            solver_options["granularity"] = tuple(float(ge_granularity * s) for s in std)
    elif solver == "mcts":
        for key, val in (("c_explore", mcts_c), ("k_dpw", mcts_k), ("alpha_dpw", mcts_alpha)):
            if val is not None:
                solver_options[key] = val
    optim_options = {k: v for k, v in (("learning_rate", lr), ("clip_range", clip), ("kl_coef", kl_coef))
                     if v is not None}
    spec = ExperimentSpec(scenario, solver, robustify, seed, budget, iterations, batch_size, out_dir,
                          overrides, solver_options, optim_options, ba_epochs_per_step=ba_epochs_per_step,
                          timing=not no_timing)
    rec = run(spec)
    click.echo(f"status: {rec.status}")
    if rec.best_reward is not None:
        click.echo(f"best failure reward: {rec.best_reward:.6f} ({len(rec.best_trajectory)} steps)")
    if rec.robustified_reward is not None:
        click.echo(f"robustified reward: {rec.robustified_reward:.6f}")
    for note in rec.notices:
        click.echo(f"notice: {note}")
    if out_dir:
        click.echo(f"artifacts: {out_dir}")
    sys.exit(EXIT_OK if rec.found_failure else EXIT_NO_FAILURE)


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="report", show_default=True)
@click.option("--title", default=None)
def report_cmd(run_dirs, out_dir, title):
    """Combine run directories into one CSV and a best-reward plot."""
    paths = report(list(run_dirs), out_dir, title)
    click.echo(f"combined: {paths['combined_csv']}")
    click.echo(f"plot: {paths['plot']}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except SystemExit as e:
        return int(e.code or 0)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except click.ClickException as e:
        # usage errors exit 1 so that 2 keeps meaning "no failure found"
        e.show()
        return EXIT_ERROR
    except Exception as e:  # noqa: BLE001
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
