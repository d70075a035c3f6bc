"""Experiment orchestration.

This module contains the Experiment class that ties data, topology, engine,
theory and metrics together for one configuration, and the sweep runner that
repeats an experiment over a list of parameter values.
"""

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import toml
from numpy.typing import NDArray
from pydantic import ValidationError

from dfl_toolkit import metrics as metrics_io
from dfl_toolkit.config import ExperimentConfig
from dfl_toolkit.datagen import export_datasets, generate, load_datasets, optimal_model
from dfl_toolkit.engine import (
    EpochSchedule,
    TrajectoryRecord,
    build_federation,
    enforce_step_gate,
    run,
)
from dfl_toolkit.errors import (
    ArtifactWriteError,
    BoundViolationError,
    ConfigurationError,
    DFLError,
    RejectedInputError,
)
from dfl_toolkit.losses import (
    ClientDataset,
    LossKind,
    LossModel,
    ModelParams,
    SmoothnessConstants,
    estimate_constants,
)
from dfl_toolkit.metrics import EpochMetrics
from dfl_toolkit.theory import (
    BoundReport,
    TheoryBounds,
    compute_bounds,
    max_step_size,
    verify_trajectory,
)
from dfl_toolkit.topology import (
    MixingMatrix,
    ServerGraph,
    build_graph,
    load_edge_list,
    load_mixing_matrix,
    metropolis_weights,
)

logger = logging.getLogger(__name__)

AUTO_STEP_FRACTION = 0.9
REGION_RADIUS_FACTOR = 4.0


def _parse_step_size(value: Any) -> float | str:
    if isinstance(value, str) and value.strip().lower() == "auto":
        return "auto"
    return float(value)


# Sweep parameter -> (configuration key, value parser)
SWEEP_PARAMETERS: dict[str, tuple[str, Callable[[Any], Any]]] = {
    "gamma": ("step_size", _parse_step_size),
    "t_c": ("schedule.t_c", int),
    "t_s": ("schedule.t_s", int),
    "topology": ("topology.generator", str),
}

SUMMARY_COLUMNS = [
    "value",
    "status",
    "exit_code",
    "sigma_a",
    "epsilon",
    "consensus_err_max",
    "gap_max",
    "message",
]


@dataclass
class DataReport:
    """Artifacts and figures of a data-generation step."""

    dataset_path: Path
    summary_path: Path
    num_points: int
    w_star: ModelParams
    constants: SmoothnessConstants
    summary: dict[str, Any]


@dataclass
class SimulationOutcome:
    """Result of one simulation.

    Attributes:
        record: Per-epoch trajectory
        metrics: Per-epoch diagnostics
        bounds: Theory bounds, absent when the step-size gate was overridden
        report: Bound check report, absent when bounds are absent
        run_dir: Directory holding the artifacts
        paths: Written artifacts by name
    """

    record: TrajectoryRecord
    metrics: list[EpochMetrics]
    bounds: TheoryBounds | None
    report: BoundReport | None
    run_dir: Path
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.report is not None and self.report.certified

    @property
    def exit_code(self) -> int:
        """0 unless a certified check failed."""
        if self.certified and self.report is not None and not self.report.passed:
            return BoundViolationError.exit_code
        return 0

    def raise_for_violations(self) -> None:
        """Raise if a certified bound check failed.

        Raises:
            BoundViolationError: With the recorded violations
        """
        if self.exit_code:
            assert self.report is not None
            details = "\n".join(self.report.violations)
            raise BoundViolationError(f"Certified run violates its bounds:\n{details}")


@dataclass
class SweepOutcome:
    """Result of a parameter sweep."""

    param: str
    summary: pd.DataFrame
    sweep_path: Path
    summary_path: Path

    @property
    def exit_code(self) -> int:
        """Largest exit code of any sweep point."""
        return int(self.summary["exit_code"].max()) if len(self.summary) else 0


class Experiment:
    """One configured DFL experiment.

    Every ingredient is built lazily on first use, so ``bounds()`` never runs
    the simulation and ``gen_data()`` never touches the topology.

    Attributes:
        config: The experiment configuration
    """

    def __init__(self, config: ExperimentConfig | None = None) -> None:
        """Initialize the experiment.

        Args:
            config: Configuration object. If None, defaults plus environment overrides.
        """
        self.config = config or ExperimentConfig().apply_env()
        logger.info(f"Experiment {self.config_hash[:12]} initialized")

    @cached_property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @cached_property
    def run_dir(self) -> Path:
        """``<output_dir>/<hash[:12]>-seed<seed>``, created on first access."""
        name = f"{self.config_hash[:12]}-seed{self.config.run.seed}"
        directory = self.config.run.output_dir / name
        if directory.exists():
            logger.warning(f"Run directory {directory} already exists; artifacts will be replaced")
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactWriteError(f"Could not create run directory {directory}: {e}") from e
        return directory

    @cached_property
    def datasets(self) -> list[ClientDataset]:
        data = self.config.data
        if data.path is not None:
            return load_datasets(data.path)
        return generate(data.synthetic_spec())

    @cached_property
    def loss_models(self) -> list[LossModel]:
        loss = self.config.loss
        kind = LossKind(loss.kind)
        return [LossModel(dataset, kind, loss.reg_coeff) for dataset in self.datasets]

    @property
    def num_servers(self) -> int:
        return max(dataset.server_id for dataset in self.datasets)

    @property
    def dim(self) -> int:
        return self.datasets[0].dim

    @cached_property
    def graph(self) -> ServerGraph:
        topology = self.config.topology
        if topology.generator == "edge-list":
            assert topology.edge_list is not None
            return load_edge_list(topology.edge_list, self.num_servers)
        params: dict[str, Any] = {}
        if topology.generator == "erdos-renyi":
            params = {"edge_probability": topology.edge_probability, "seed": topology.seed}
        return build_graph(topology.generator, self.num_servers, **params)

    @cached_property
    def mixing(self) -> MixingMatrix:
        if self.config.topology.mixing_matrix is not None:
            return load_mixing_matrix(self.config.topology.mixing_matrix, self.graph)
        return metropolis_weights(self.graph)

    @cached_property
    def schedule(self) -> EpochSchedule:
        return EpochSchedule(t_c=self.config.schedule.t_c, t_s=self.config.schedule.t_s)

    @cached_property
    def w_star(self) -> ModelParams:
        return optimal_model(self.datasets, self.config.loss.reg_coeff)

    @cached_property
    def initial_models(self) -> NDArray[np.float64]:
        """W_0 with rows drawn from N(0, init_std²·I) using ``run.seed``."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.config.run.seed)))
        return rng.standard_normal((self.num_servers, self.dim)) * self.config.run.init_std

    @cached_property
    def region_radius(self) -> float:
        if self.config.run.region_radius is not None:
            return self.config.run.region_radius
        offsets = self.initial_models - self.w_star
        spread = float(np.max(np.sqrt(np.einsum("ij,ij->i", offsets, offsets))))
        return REGION_RADIUS_FACTOR * spread if spread > 0 else 1.0

    @cached_property
    def constants(self) -> SmoothnessConstants:
        center = self.initial_models.mean(axis=0)
        return estimate_constants(self.loss_models, center, self.region_radius)

    @cached_property
    def step_size(self) -> float:
        """Resolved γ; ``auto`` is 0.9 × the step-size gate."""
        if self.config.step_size == "auto":
            gamma = AUTO_STEP_FRACTION * max_step_size(self.constants, self.schedule.t_c)
            logger.info(f"Automatic step size gamma={gamma:.6g}")
            return gamma
        return float(self.config.step_size)

    @cached_property
    def within_gate(self) -> bool:
        """Whether γ satisfies the gate; raises unless the gate is overridden."""
        return enforce_step_gate(
            self.constants,
            self.schedule.t_c,
            self.step_size,
            self.config.flags.override_step_gate,
        )

    @cached_property
    def theory_bounds(self) -> TheoryBounds | None:
        """Bounds of the configuration, or None when the gate is overridden."""
        if not self.within_gate:
            logger.warning("Step-size gate overridden; the run will not be certified")
            return None
        return compute_bounds(
            self.constants,
            self.mixing,
            self.schedule.t_c,
            self.schedule.t_s,
            self.step_size,
            self.initial_models,
            self.w_star,
        )

    def gen_data(self) -> DataReport:
        """Write the dataset and its summary to the run directory.

        Returns:
            Paths and the realized optimum and constants
        """
        dataset_path = export_datasets(self.datasets, self.run_dir / "dataset.csv")
        spread = max(
            float(np.linalg.norm(model.minimizer() - self.w_star)) for model in self.loss_models
        )
        constants = self.constants
        summary: dict[str, Any] = {
            "num_servers": self.num_servers,
            "num_clients": len(self.datasets),
            "num_points": sum(dataset.size for dataset in self.datasets),
            "dim": self.dim,
            "w_star": self.w_star.tolist(),
            "mu": constants.mu,
            "L": constants.L,
            "theta": constants.theta,
            "region_radius": constants.region_radius,
            "region_center": constants.center,
            "client_minimizer_spread": spread,
        }
        summary_path = self.run_dir / "summary.toml"
        self._write_text(summary_path, toml.dumps(summary))
        logger.info(f"Dataset summary written to {summary_path}")
        return DataReport(
            dataset_path=dataset_path,
            summary_path=summary_path,
            num_points=summary["num_points"],
            w_star=self.w_star,
            constants=constants,
            summary=summary,
        )

    def bounds(self) -> dict[str, float]:
        """Theory constants of the configuration, without simulating.

        Raises:
            ConfigurationError: If γ violates the step-size gate
        """
        bounds = self.theory_bounds
        if bounds is None:
            raise ConfigurationError(
                f"Step size {self.step_size:.6g} is outside the gate; no bounds apply"
            )
        return {
            "sigma_a": bounds.sigma_a,
            "lam": bounds.lam,
            "capital_lambda": bounds.capital_lambda,
            "y0": bounds.y0,
            "epsilon": bounds.epsilon,
            "delta0": bounds.delta0,
            "max_step_size": max_step_size(self.constants, self.schedule.t_c),
            "gamma": bounds.gamma,
            "mu": self.constants.mu,
            "L": self.constants.L,
            "theta": self.constants.theta,
        }

    def simulate(self, fmt: metrics_io.CsvFormat = "csv") -> SimulationOutcome:
        """Run the configured simulation and write its artifacts.

        Args:
            fmt: Metrics file layout, ``csv`` or ``gnuplot``

        Returns:
            The outcome, including the bound report of certified runs

        Raises:
            ConfigurationError: If γ violates the gate without override
            NumericOverflowError: If a gradient is not finite
        """
        bounds = self.theory_bounds
        federation = build_federation(
            self.loss_models,
            self.mixing,
            self.schedule,
            self.step_size,
            self.initial_models,
            constants=self.constants,
            w_star=self.w_star,
            record_iterates=self.config.flags.record_iterates,
        )
        record = run(
            federation,
            self.config.run.num_epochs,
            self.config.run.stop_tolerance,
            override_step_gate=self.config.flags.override_step_gate,
            workers=self.config.run.workers,
        )
        metrics = metrics_io.compute_metrics(record, self.w_star, bounds, self.loss_models)
        report = None if bounds is None else verify_trajectory(record, bounds)

        paths = {
            "metrics": metrics_io.export_csv(metrics, self.run_dir / "metrics.csv", fmt),
            "models": metrics_io.export_models_csv(
                record.final.server_models, self.run_dir / "models.csv"
            ),
        }
        if self.config.flags.record_iterates:
            paths["iterates"] = metrics_io.export_iterates_csv(
                record, self.run_dir / "iterates.csv"
            )
        paths["config"] = self.run_dir / "config.toml"
        self._write_text(paths["config"], self.config.to_toml())

        outcome = SimulationOutcome(
            record=record,
            metrics=metrics,
            bounds=bounds,
            report=report,
            run_dir=self.run_dir,
            paths=paths,
        )
        if report is not None and not report.certified:
            logger.warning(f"Run not certified: {report.reason}")
        return outcome

    @staticmethod
    def _write_text(path: Path, text: str) -> None:
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            raise ArtifactWriteError(f"Could not write {path}: {e}") from e


def _sweep_point(config_data: dict[str, Any], param: str, value: Any) -> dict[str, Any]:
    """Run one sweep point; failures are reported in the result, never raised."""
    key, _ = SWEEP_PARAMETERS[param]
    row: dict[str, Any] = {
        "value": value,
        "status": "ok",
        "exit_code": 0,
        "sigma_a": math.nan,
        "epsilon": math.nan,
        "consensus_err_max": math.nan,
        "gap_max": math.nan,
        "message": "",
    }
    frame = metrics_io.metrics_frame([])
    try:
        config = ExperimentConfig.model_validate(config_data).with_overrides(**{key: value})
        outcome = Experiment(config).simulate()
    except DFLError as e:
        row.update(status="failed", exit_code=e.exit_code, message=str(e))
        return {"summary": row, "metrics": frame}
    except ValidationError as e:
        row.update(status="failed", exit_code=ConfigurationError.exit_code, message=str(e))
        return {"summary": row, "metrics": frame}

    last = outcome.metrics[-1]
    row.update(
        exit_code=outcome.exit_code,
        consensus_err_max=last.consensus_error,
        gap_max=last.optimality_gap,
    )
    if outcome.bounds is not None:
        row.update(sigma_a=outcome.bounds.sigma_a, epsilon=outcome.bounds.epsilon)
    if outcome.exit_code:
        violations = outcome.report.violations if outcome.report else []
        row.update(status="violated", message="; ".join(violations))
    elif not outcome.certified:
        row.update(status="uncertified")
    return {"summary": row, "metrics": metrics_io.metrics_frame(outcome.metrics)}


def run_sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence[Any],
    workers: int = 1,
) -> SweepOutcome:
    """Run one simulation per value of a parameter.

    Each point gets its own run directory (its configuration, and therefore
    its hash, differs). Failing points are recorded and the sweep continues.

    Args:
        config: Base configuration
        param: One of ``gamma``, ``t_c``, ``t_s``, ``topology``
        values: Values to sweep over
        workers: Processes running sweep points concurrently

    Returns:
        The sweep outcome with the combined tables

    Raises:
        RejectedInputError: If the parameter is unknown, values are empty or unparsable
    """
    if param not in SWEEP_PARAMETERS:
        known = ", ".join(SWEEP_PARAMETERS)
        raise RejectedInputError(f"Cannot sweep '{param}' (known: {known})")
    if not values:
        raise RejectedInputError("sweep needs at least one value")
    if workers < 1:
        raise RejectedInputError(f"workers must be at least 1, got {workers}")
    _, parse = SWEEP_PARAMETERS[param]
    try:
        parsed = [parse(value) for value in values]
    except ValueError as e:
        raise RejectedInputError(f"Invalid value for '{param}': {e}") from e

    config_data = config.model_dump(mode="json")
    logger.info(f"Sweeping {param} over {len(parsed)} values with {workers} worker(s)")
    if workers == 1:
        results = [_sweep_point(config_data, param, value) for value in parsed]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(
                executor.map(
                    _sweep_point,
                    [config_data] * len(parsed),
                    [param] * len(parsed),
                    parsed,
                )
            )

    frames = []
    for result in results:
        if result["metrics"].empty:
            continue
        frame = result["metrics"].copy()
        frame.insert(0, "value", result["summary"]["value"])
        frames.append(frame)
    combined = (
        pd.concat(frames, ignore_index=True)
        if frames
        else pd.DataFrame(columns=["value", *metrics_io.METRICS_COLUMNS])
    )
    summary = pd.DataFrame([result["summary"] for result in results], columns=SUMMARY_COLUMNS)

    sweep_dir = config.run.output_dir / f"sweep-{param}-{config.config_hash()[:12]}"
    try:
        sweep_dir.mkdir(parents=True, exist_ok=True)
        sweep_path = sweep_dir / "sweep.csv"
        summary_path = sweep_dir / "sweep_summary.csv"
        combined.to_csv(
            sweep_path, index=False, float_format=metrics_io.FLOAT_FORMAT, lineterminator="\n"
        )
        summary.to_csv(
            summary_path, index=False, float_format=metrics_io.FLOAT_FORMAT, lineterminator="\n"
        )
    except OSError as e:
        raise ArtifactWriteError(f"Could not write sweep results to {sweep_dir}: {e}") from e

    failed = int((summary["status"] != "ok").sum())
    logger.info(f"Sweep finished: {len(summary)} points, {failed} not ok, results in {sweep_dir}")
    return SweepOutcome(
        param=param, summary=summary, sweep_path=sweep_path, summary_path=summary_path
    )
