"""Command-line interface for the DFL toolkit.

This module provides the ``dfl`` command using Click, with Rich for the
human-facing summaries. Machine-readable output (the bounds block and the
echoed configuration) goes to stdout; everything else goes to stderr.
"""

import logging
import os
import sys
from collections.abc import Callable
from functools import wraps
from pathlib import Path
from typing import Any, TypeVar

import click
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from dfl_toolkit.config import ExperimentConfig
from dfl_toolkit.errors import ConfigurationError, DFLError
from dfl_toolkit.experiment import SWEEP_PARAMETERS, Experiment, SimulationOutcome, run_sweep
from dfl_toolkit.metrics import final_summary

# Initialize Rich console
console = Console(stderr=True)

F = TypeVar("F", bound=Callable[..., Any])


def setup_logging(debug: bool = False) -> None:
    """Setup logging configuration.

    Args:
        debug: Whether to enable debug logging
    """
    load_dotenv()
    if debug:
        level: int | str = logging.DEBUG
        format_str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    else:
        level = os.getenv("DFL_LOG_LEVEL", "WARNING").upper()
        format_str = "%(levelname)s: %(message)s"

    logging.basicConfig(
        level=level, format=format_str, handlers=[logging.StreamHandler(sys.stderr)]
    )


def display_error(message: str) -> None:
    """Display an error message.

    Args:
        message: The error message to display
    """
    error_panel = Panel(message, title="Error", border_style="red")
    console.print(error_panel)


def display_table(title: str, rows: dict[str, Any]) -> None:
    """Display key/value pairs as a two-column table."""
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="magenta")
    for key, value in rows.items():
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)


def display_outcome(outcome: SimulationOutcome) -> None:
    """Display the summary of a finished simulation."""
    summary = final_summary(outcome.metrics)
    rows: dict[str, Any] = {
        "epochs": outcome.record.completed_epochs,
        "consensus error (max)": summary["consensus_err_max"],
        "deviation norm": summary["deviation_norm"],
        "gap to w* (max)": summary["gap_max"],
        "gap of average": summary["gap_avg"],
    }
    if outcome.bounds is not None:
        rows["epsilon"] = outcome.bounds.epsilon
        rows["sigma_A"] = outcome.bounds.sigma_a
    rows["run directory"] = str(outcome.run_dir)
    display_table("Simulation", rows)

    if outcome.report is None:
        console.print("Step-size gate overridden: run not certified", style="yellow")
    elif not outcome.report.certified:
        console.print(f"Run not certified: {outcome.report.reason}", style="yellow")
    elif outcome.report.passed:
        checked = "including epsilon" if outcome.report.limit_checked else "epsilon not reached"
        console.print(f"All bound checks passed ({checked})", style="bold green")


def handle_errors(command: F) -> F:
    """Turn toolkit and validation errors into a red panel and an exit code."""

    @wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            display_error(f"Invalid configuration:\n{e}")
            sys.exit(ConfigurationError.exit_code)
        except DFLError as e:
            display_error(str(e))
            sys.exit(e.exit_code)

    return wrapper  # type: ignore[return-value]


def load_config(config_path: Path | None, **overrides: Any) -> ExperimentConfig:
    """Load the TOML file (or defaults), then apply environment and flag overrides."""
    config = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
    return config.apply_env().with_overrides(**overrides)


def _step_size(value: str | None) -> float | str | None:
    if value is None or value == "auto":
        return value
    try:
        return float(value)
    except ValueError as e:
        raise click.BadParameter(f"expected a number or 'auto', got {value!r}") from e


config_option = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="Experiment TOML file (default: built-in defaults)",
)
output_dir_option = click.option(
    "--output-dir",
    type=click.Path(path_type=Path, file_okay=False),
    default=None,
    help="Root directory of run directories",
)
seed_option = click.option("--seed", type=int, default=None, help="Data seed")


@click.group()
@click.option("--debug", is_flag=True, help="Enable debug logging")
def main(debug: bool) -> None:
    """DFL toolkit - simulate distributed federated learning and check its bounds.

    Servers each run federated averaging over their own clients, then agree on
    a model through consensus iterations over a server graph. Every command
    reads one TOML experiment file; flags override its values.
    """
    setup_logging(debug)


@main.command("gen-data")
@config_option
@seed_option
@output_dir_option
@handle_errors
def gen_data(config_path: Path | None, seed: int | None, output_dir: Path | None) -> None:
    """Generate the synthetic dataset and report the realized optimum."""
    config = load_config(config_path, **{"data.seed": seed, "run.output_dir": output_dir})
    report = Experiment(config).gen_data()
    display_table(
        "Dataset",
        {
            "points": report.num_points,
            "w*": ", ".join(f"{v:.6g}" for v in report.w_star),
            "mu": report.constants.mu,
            "L": report.constants.L,
            "theta": report.constants.theta,
            "region radius": report.constants.region_radius,
        },
    )
    click.echo(str(report.dataset_path))


@main.command()
@config_option
@click.option("--epochs", type=int, default=None, help="Number of epochs")
@click.option("--step-size", type=str, default=None, help="Step size, or 'auto'")
@click.option("--t-c", type=int, default=None, help="Client iterations per epoch")
@click.option("--t-s", type=int, default=None, help="Server iterations per epoch")
@seed_option
@output_dir_option
@click.option("--workers", type=int, default=None, help="Client-phase threads")
@click.option(
    "--override-step-gate",
    is_flag=True,
    help="Run even if the step size violates the convergence gate",
)
@click.option("--record-iterates", is_flag=True, help="Write every consensus iterate")
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["csv", "gnuplot"]),
    default="csv",
    help="Metrics file layout (default: csv)",
)
@click.option("--print-config", is_flag=True, help="Print the resolved config and exit")
@handle_errors
def simulate(
    config_path: Path | None,
    epochs: int | None,
    step_size: str | None,
    t_c: int | None,
    t_s: int | None,
    seed: int | None,
    output_dir: Path | None,
    workers: int | None,
    override_step_gate: bool,
    record_iterates: bool,
    fmt: str,
    print_config: bool,
) -> None:
    """Run the simulation, write metrics and models, and check the bounds.

    Exits with 0 on success, 2 on configuration errors, 3 when a certified
    run violates a bound and 4 on numeric overflow.
    """
    overrides = {
        "run.num_epochs": epochs,
        "step_size": _step_size(step_size),
        "schedule.t_c": t_c,
        "schedule.t_s": t_s,
        "data.seed": seed,
        "run.output_dir": output_dir,
        "run.workers": workers,
        "flags.override_step_gate": override_step_gate or None,
        "flags.record_iterates": record_iterates or None,
    }
    config = load_config(config_path, **overrides)
    if print_config:
        click.echo(config.to_toml(), nl=False)
        return
    with console.status("[bold green]Simulating...", spinner="dots"):
        outcome = Experiment(config).simulate(fmt="gnuplot" if fmt == "gnuplot" else "csv")
    display_outcome(outcome)
    last = outcome.metrics[-1]
    epsilon = outcome.bounds.epsilon if outcome.bounds is not None else None
    click.echo(f"gap_max={last.optimality_gap!r} epsilon={epsilon!r}")
    outcome.raise_for_violations()


@main.command()
@config_option
@click.option("--step-size", type=str, default=None, help="Step size, or 'auto'")
@click.option("--t-c", type=int, default=None, help="Client iterations per epoch")
@click.option("--t-s", type=int, default=None, help="Server iterations per epoch")
@seed_option
@handle_errors
def bounds(
    config_path: Path | None,
    step_size: str | None,
    t_c: int | None,
    t_s: int | None,
    seed: int | None,
) -> None:
    """Print the theory constants as key=value lines without simulating."""
    overrides = {
        "step_size": _step_size(step_size),
        "schedule.t_c": t_c,
        "schedule.t_s": t_s,
        "data.seed": seed,
    }
    values = Experiment(load_config(config_path, **overrides)).bounds()
    for key, value in values.items():
        click.echo(f"{key}={value!r}")


@main.command()
@config_option
@click.option(
    "--param",
    type=click.Choice(list(SWEEP_PARAMETERS)),
    required=True,
    help="Parameter to sweep",
)
@click.option("--values", required=True, help="Comma-separated values")
@click.option("--workers", type=int, default=1, help="Sweep points run in parallel")
@output_dir_option
@handle_errors
def sweep(
    config_path: Path | None,
    param: str,
    values: str,
    workers: int,
    output_dir: Path | None,
) -> None:
    """Run one simulation per value and combine the results.

    Failing points are recorded in the summary and the sweep continues; the
    exit code is the largest exit code of any point.
    """
    config = load_config(config_path, **{"run.output_dir": output_dir})
    points = [v.strip() for v in values.split(",") if v.strip()]
    outcome = run_sweep(config, param, points, workers)

    table = Table(title=f"Sweep over {param}")
    for column in ("value", "status", "epsilon", "gap_max"):
        table.add_column(column, style="cyan" if column == "value" else "magenta")
    for row in outcome.summary.itertuples(index=False):
        table.add_row(
            str(row.value), str(row.status), f"{row.epsilon:.6g}", f"{row.gap_max:.6g}"
        )
    console.print(table)
    click.echo(str(outcome.sweep_path))
    if outcome.exit_code:
        sys.exit(outcome.exit_code)


if __name__ == "__main__":
    main()
