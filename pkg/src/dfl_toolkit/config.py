"""Configuration module for DFL experiments.

An experiment is described by a single TOML file. Every section maps to a
pydantic model that rejects unknown keys, so a typo fails before any
computation starts. Environment variables (optionally from a ``.env`` file)
and CLI flags override file values, in that order.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Literal

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dfl_toolkit.datagen import SyntheticSpec
from dfl_toolkit.errors import ConfigurationError

logger = logging.getLogger(__name__)

GraphGenerator = Literal["complete", "cycle", "path", "star", "erdos-renyi", "edge-list"]


class TopologyConfig(BaseModel):
    """Server graph and consensus weights.

    Attributes:
        generator: Graph generator name, or ``edge-list`` to read a file
        edge_probability: Edge probability for ``erdos-renyi``
        seed: Seed for ``erdos-renyi`` sampling
        edge_list: Edge-list file for ``edge-list``
        mixing_matrix: Optional file with a user-supplied mixing matrix
    """

    model_config = ConfigDict(extra="forbid")

    generator: GraphGenerator = Field(default="cycle", description="Graph generator")
    edge_probability: float | None = Field(
        default=None, ge=0.0, le=1.0, description="Edge probability for erdos-renyi"
    )
    seed: int = Field(default=0, ge=0, description="Seed for random graphs")
    edge_list: Path | None = Field(default=None, description="Edge-list file")
    mixing_matrix: Path | None = Field(default=None, description="Mixing matrix file")

    @model_validator(mode="after")
    def _check_generator_params(self) -> "TopologyConfig":
        if self.generator == "erdos-renyi" and self.edge_probability is None:
            raise ValueError("erdos-renyi topology requires edge_probability")
        if self.generator == "edge-list" and self.edge_list is None:
            raise ValueError("edge-list topology requires edge_list")
        return self


class ScheduleConfig(BaseModel):
    """Client and server iterations per epoch."""

    model_config = ConfigDict(extra="forbid")

    t_c: int = Field(default=250, ge=1, description="Client iterations per epoch")
    t_s: int = Field(default=25, ge=1, description="Server iterations per epoch")


class LossConfig(BaseModel):
    """Client loss family."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["least-squares", "ridge"] = Field(
        default="least-squares", description="Loss family"
    )
    reg_coeff: float = Field(default=0.0, ge=0.0, description="Ridge coefficient")

    @model_validator(mode="after")
    def _check_coefficient(self) -> "LossConfig":
        if self.kind == "least-squares" and self.reg_coeff != 0:
            raise ValueError("least-squares loss takes no reg_coeff; use kind = 'ridge'")
        return self


class DataConfig(BaseModel):
    """Synthetic data parameters, or a dataset file to load instead.

    Attributes:
        num_servers: Number of servers M
        clients_per_server: Clients per server N
        points_per_client: Data points per client D
        dim: Feature dimension d
        w_true: Generating model
        noise_std: Label noise standard deviation
        feature_std: Feature standard deviation
        intercept: Make the last feature the constant 1
        seed: Data seed
        path: Dataset CSV to load instead of generating
    """

    model_config = ConfigDict(extra="forbid")

    num_servers: int = Field(default=5, ge=1, description="Number of servers")
    clients_per_server: int = Field(default=5, ge=1, description="Clients per server")
    points_per_client: int = Field(default=100, ge=1, description="Points per client")
    dim: int = Field(default=2, ge=1, description="Feature dimension")
    w_true: list[float] = Field(default=[5.0, 2.0], description="Generating model")
    noise_std: float = Field(default=0.1, ge=0.0, description="Label noise std")
    feature_std: float = Field(default=1.0, gt=0.0, description="Feature std")
    intercept: bool = Field(default=False, description="Constant last feature")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Data seed")
    path: Path | None = Field(default=None, description="Dataset CSV to load")

    @model_validator(mode="after")
    def _check_w_true(self) -> "DataConfig":
        if len(self.w_true) != self.dim:
            raise ValueError(f"w_true has {len(self.w_true)} entries but dim is {self.dim}")
        return self

    def synthetic_spec(self) -> SyntheticSpec:
        """The generator parameters of this section."""
        return SyntheticSpec(
            m=self.num_servers,
            n=self.clients_per_server,
            d_points=self.points_per_client,
            dim=self.dim,
            w_true=self.w_true,
            noise_std=self.noise_std,
            feature_std=self.feature_std,
            intercept=self.intercept,
            seed=self.seed,
        )


class RunConfig(BaseModel):
    """Run length, initial models and output location.

    Attributes:
        num_epochs: Maximum number of epochs
        stop_tolerance: Stop once no server moves more than this in an epoch
        seed: Seed of the initial server models
        init_std: Spread of the initial server models around the origin
        region_radius: Radius of the θ certification ball (default derived)
        output_dir: Directory under which run directories are created
        workers: Threads for the client phase
    """

    model_config = ConfigDict(extra="forbid")

    num_epochs: int = Field(default=200, ge=0, description="Maximum number of epochs")
    stop_tolerance: float | None = Field(default=None, gt=0.0, description="Early stop")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Initial-model seed")
    init_std: float = Field(default=1.0, ge=0.0, description="Initial model spread")
    region_radius: float | None = Field(default=None, gt=0.0, description="Theta radius")
    output_dir: Path = Field(default=Path("runs"), description="Output root")
    workers: int = Field(default=1, ge=1, description="Client-phase threads")


class FlagsConfig(BaseModel):
    """Optional behaviours."""

    model_config = ConfigDict(extra="forbid")

    record_iterates: bool = Field(default=False, description="Write the iterate log")
    override_step_gate: bool = Field(
        default=False, description="Allow step sizes above the convergence gate"
    )


class ExperimentConfig(BaseModel):
    """Configuration class for one DFL experiment.

    Attributes:
        step_size: Explicit γ, or ``auto`` for 0.9 × the step-size gate
        topology: Server graph settings
        schedule: Epoch schedule
        loss: Client loss family
        data: Data generation or loading
        run: Run settings
        flags: Optional behaviours
    """

    model_config = ConfigDict(extra="forbid")

    step_size: float | Literal["auto"] = Field(default="auto", description="Step size")
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    flags: FlagsConfig = Field(default_factory=FlagsConfig)

    @model_validator(mode="after")
    def _check_step_size(self) -> "ExperimentConfig":
        if isinstance(self.step_size, float) and self.step_size < 0:
            raise ValueError(f"step_size must be non-negative, got {self.step_size}")
        return self

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        """Read a TOML configuration file.

        Raises:
            ConfigurationError: If the file is missing or not valid TOML
            pydantic.ValidationError: If the content breaks the schema
        """
        config_file = Path(path)
        if not config_file.exists():
            raise ConfigurationError(f"Config file not found: {config_file}")
        try:
            raw = toml.load(config_file)
        except toml.TomlDecodeError as e:
            raise ConfigurationError(f"Invalid TOML in {config_file}: {e}") from e
        logger.info(f"Loaded configuration from {config_file}")
        return cls.model_validate(raw)

    def to_toml(self) -> str:
        """Serialize the normalized configuration back to TOML."""
        return toml.dumps(self.model_dump(mode="json", exclude_none=True))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form of the configuration."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Return a copy with dotted keys replaced, e.g. ``{"schedule.t_c": 10}``.

        ``None`` values mean "not given" and are skipped.
        """
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.rpartition(".")
            target = data[section] if section else data
            if key not in target:
                raise ConfigurationError(f"Unknown configuration key '{dotted}'")
            target[key] = str(value) if isinstance(value, Path) else value
        return type(self).model_validate(data)

    def apply_env(self) -> "ExperimentConfig":
        """Apply environment overrides, loading a ``.env`` file when present.

        Reads ``DFL_OUTPUT_DIR`` and ``DFL_WORKERS``.
        """
        load_dotenv()
        workers = os.getenv("DFL_WORKERS")
        try:
            num_workers = int(workers) if workers else None
        except ValueError as e:
            raise ConfigurationError(f"DFL_WORKERS must be an integer, got {workers!r}") from e
        return self.with_overrides(
            **{
                "run.output_dir": os.getenv("DFL_OUTPUT_DIR"),
                "run.workers": num_workers,
            }
        )
