"""Synthetic linear-regression data and the exact-optimum oracle.

Each client's data is drawn from its own random stream, derived from the
experiment seed and the client's row-major position, so a dataset never
depends on generation order or on how many other clients exist.
"""

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dfl_toolkit.errors import ArtifactWriteError, AssumptionViolationError, RejectedInputError
from dfl_toolkit.losses import (
    SINGULAR_TOLERANCE,
    ClientDataset,
    LossKind,
    LossModel,
    ModelParams,
    federation_weights,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class SyntheticSpec(BaseModel):
    """Parameters of a synthetic regression federation.

    Attributes:
        m: Number of servers
        n: Clients per server
        d_points: Data points per client (D)
        dim: Feature dimension d
        w_true: Generating model
        noise_std: Standard deviation of the additive label noise
        feature_std: Standard deviation of the feature entries
        intercept: Replace the last feature by the constant 1 (straight-line fit)
        seed: Root seed of every client stream
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    m: int = Field(default=5, ge=1, description="Number of servers")
    n: int = Field(default=5, ge=1, description="Clients per server")
    d_points: int = Field(default=100, ge=1, description="Data points per client")
    dim: int = Field(default=2, ge=1, description="Feature dimension")
    w_true: list[float] = Field(default=[5.0, 2.0], description="Generating model")
    noise_std: float = Field(default=0.1, ge=0.0, description="Label noise std")
    feature_std: float = Field(default=1.0, gt=0.0, description="Feature std")
    intercept: bool = Field(default=False, description="Constant last feature")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Root seed")

    @model_validator(mode="after")
    def _check_w_true(self) -> "SyntheticSpec":
        if len(self.w_true) != self.dim:
            raise ValueError(f"w_true has {len(self.w_true)} entries but dim is {self.dim}")
        return self


def client_generator(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream of the client at row-major position ``index``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def generate(spec: SyntheticSpec) -> list[ClientDataset]:
    """Draw every client dataset of a synthetic federation.

    Features are independent N(0, feature_std²) entries and labels are
    ``y = w_true'x + noise`` with noise ~ N(0, noise_std²). Datasets come back
    in row-major (server, client) order.
    """
    w_true = np.asarray(spec.w_true, dtype=np.float64)
    datasets = []
    for server in range(1, spec.m + 1):
        for client in range(1, spec.n + 1):
            rng = client_generator(spec.seed, (server - 1) * spec.n + (client - 1))
            features = rng.standard_normal((spec.d_points, spec.dim)) * spec.feature_std
            if spec.intercept:
                features[:, -1] = 1.0
            noise = rng.normal(0.0, spec.noise_std, spec.d_points) if spec.noise_std else 0.0
            labels = features @ w_true + noise
            datasets.append(
                ClientDataset(
                    features=features, labels=labels, server_id=server, client_id=client
                )
            )
    logger.info(
        f"Generated {len(datasets)} client datasets "
        f"({spec.m} servers x {spec.n} clients x {spec.d_points} points, seed={spec.seed})"
    )
    return datasets


def optimal_model(
    datasets: Sequence[ClientDataset],
    reg_coeff: float = 0.0,
) -> ModelParams:
    """Solve the normal equations of the global objective exactly.

    Args:
        datasets: Every client dataset of the federation
        reg_coeff: Ridge coefficient shared by all clients

    Returns:
        The exact minimizer w*

    Raises:
        RejectedInputError: If there are no datasets or dimensions differ
        AssumptionViolationError: If the pooled system is singular
    """
    if not datasets:
        raise RejectedInputError("at least one dataset is required")
    dim = datasets[0].dim
    if any(dataset.dim != dim for dataset in datasets):
        raise RejectedInputError("all client datasets must share one dimension")

    kind = LossKind.RIDGE if reg_coeff else LossKind.LEAST_SQUARES
    models = [LossModel(dataset, kind, reg_coeff) for dataset in datasets]
    hessian = np.zeros((dim, dim))
    linear = np.zeros(dim)
    for weight, model in zip(federation_weights(models), models):
        hessian = hessian + weight * model.hessian
        linear = linear + weight * model.linear_term

    eigenvalues = np.linalg.eigvalsh(hessian)
    if eigenvalues[0] <= SINGULAR_TOLERANCE * max(float(eigenvalues[-1]), 1.0):
        raise AssumptionViolationError(
            f"The pooled normal equations are singular (smallest eigenvalue "
            f"{eigenvalues[0]:.3e}); the optimum is not unique"
        )
    return np.linalg.solve(hessian, linear)


def dataset_frame(datasets: Sequence[ClientDataset]) -> pd.DataFrame:
    """Flatten datasets into a ``server,client,y,x1..xd`` table."""
    if not datasets:
        raise RejectedInputError("at least one dataset is required")
    dim = datasets[0].dim
    frames = []
    for dataset in datasets:
        frame = pd.DataFrame(dataset.features, columns=[f"x{k}" for k in range(1, dim + 1)])
        frame.insert(0, "y", dataset.labels)
        frame.insert(0, "client", dataset.client_id)
        frame.insert(0, "server", dataset.server_id)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def export_datasets(datasets: Sequence[ClientDataset], path: str | Path) -> Path:
    """Write datasets as CSV with header ``server,client,y,x1,...,xd``.

    Raises:
        ArtifactWriteError: If the file cannot be written
    """
    output = Path(path)
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        dataset_frame(datasets).to_csv(output, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise ArtifactWriteError(f"Could not write dataset file {output}: {e}") from e
    logger.info(f"Wrote {sum(d.size for d in datasets)} data points to {output}")
    return output


def load_datasets(path: str | Path) -> list[ClientDataset]:
    """Read datasets written by :func:`export_datasets`.

    Raises:
        RejectedInputError: If the file is missing or does not follow the format
    """
    source = Path(path)
    if not source.exists():
        raise RejectedInputError(f"Dataset file not found: {source}")
    try:
        frame = pd.read_csv(source, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise RejectedInputError(f"Unreadable dataset file {source}: {e}") from e

    feature_columns = [c for c in frame.columns if c.startswith("x")]
    expected = ["server", "client", "y"] + [f"x{k}" for k in range(1, len(feature_columns) + 1)]
    if list(frame.columns) != expected or not feature_columns:
        raise RejectedInputError(
            f"Dataset file {source} must have columns server,client,y,x1,...,xd"
        )

    datasets = []
    try:
        for (server, client), group in frame.groupby(["server", "client"], sort=True):
            datasets.append(
                ClientDataset(
                    features=group[feature_columns].to_numpy(dtype=np.float64),
                    labels=group["y"].to_numpy(dtype=np.float64),
                    server_id=int(server),
                    client_id=int(client),
                )
            )
    except ValueError as e:
        raise RejectedInputError(f"Invalid dataset file {source}: {e}") from e
    logger.info(f"Loaded {len(datasets)} client datasets from {source}")
    return datasets
