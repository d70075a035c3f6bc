"""Per-epoch diagnostics and the CSV artifacts written from them.

All norms are Euclidean. Floats are written with 17 significant digits so a
parsed file reproduces the in-memory values exactly.
"""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from dfl_toolkit.engine import TrajectoryRecord
from dfl_toolkit.errors import ArtifactWriteError, RejectedInputError
from dfl_toolkit.losses import LossModel, as_params, federated_objective
from dfl_toolkit.theory import (
    TheoryBounds,
    average_optimality_bound,
    disagreement,
    server_deviation_bound,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
METRICS_COLUMNS = [
    "epoch",
    "consensus_err_max",
    "consensus_err_mean",
    "gap_max",
    "gap_avg",
    "lemma1_bound",
    "lemma4_bound",
    "epsilon",
    "objective",
]

CsvFormat = Literal["csv", "gnuplot"]


class EpochMetrics(BaseModel):
    """Diagnostics of one epoch boundary.

    Attributes:
        epoch: Epoch index p
        consensus_error: max_i ‖w^i_p − w̄_p‖
        mean_consensus_error: mean_i ‖w^i_p − w̄_p‖
        optimality_gap: max_i ‖w^i_p − w*‖
        avg_gap: ‖w̄_p − w*‖
        lemma1_bound: Server-to-average deviation bound at p
        lemma4_bound: Average-to-optimum bound at p
        epsilon: Limiting tolerance
        objective_value: f(w̄_p)
        deviation_norm: ‖W_p − 1w̄_p'‖ (spectral norm)
    """

    model_config = ConfigDict(frozen=True)

    epoch: int = Field(ge=0)
    consensus_error: float = Field(ge=0)
    mean_consensus_error: float = Field(ge=0)
    optimality_gap: float = Field(ge=0)
    avg_gap: float = Field(ge=0)
    lemma1_bound: float | None = None
    lemma4_bound: float | None = None
    epsilon: float | None = None
    objective_value: float | None = None
    deviation_norm: float = Field(default=0.0, ge=0)

    def as_row(self) -> dict[str, Any]:
        """The metrics keyed by CSV column name."""
        return {
            "epoch": self.epoch,
            "consensus_err_max": self.consensus_error,
            "consensus_err_mean": self.mean_consensus_error,
            "gap_max": self.optimality_gap,
            "gap_avg": self.avg_gap,
            "lemma1_bound": self.lemma1_bound,
            "lemma4_bound": self.lemma4_bound,
            "epsilon": self.epsilon,
            "objective": self.objective_value,
        }


def compute_metrics(
    record: TrajectoryRecord,
    w_star: Any,
    bounds: TheoryBounds | None = None,
    models: Sequence[LossModel] | None = None,
) -> list[EpochMetrics]:
    """Compute one :class:`EpochMetrics` per snapshot.

    Args:
        record: Trajectory with at least the initial snapshot
        w_star: Exact optimum
        bounds: Theory bounds; bound columns stay empty without them
        models: Client losses; the objective column stays empty without them

    Returns:
        Metrics in epoch order

    Raises:
        RejectedInputError: If the record is empty or w* has the wrong dimension
    """
    if not record.snapshots:
        raise RejectedInputError("cannot compute metrics of an empty trajectory")
    dim = record.snapshots[0].server_models.shape[1]
    optimum = as_params(w_star, dim)

    metrics = []
    for snapshot in record.snapshots:
        p = snapshot.epoch
        gaps = snapshot.server_models - optimum
        gap_norms = np.sqrt(np.einsum("ij,ij->i", gaps, gaps))
        offset = snapshot.average - optimum
        metrics.append(
            EpochMetrics(
                epoch=p,
                consensus_error=float(snapshot.consensus_errors.max()),
                mean_consensus_error=float(snapshot.consensus_errors.mean()),
                optimality_gap=float(gap_norms.max()),
                avg_gap=float(np.sqrt(offset @ offset)),
                lemma1_bound=None if bounds is None else server_deviation_bound(bounds, p),
                lemma4_bound=None if bounds is None else average_optimality_bound(bounds, p),
                epsilon=None if bounds is None else bounds.epsilon,
                objective_value=(
                    None if models is None else federated_objective(models, snapshot.average)
                ),
                deviation_norm=disagreement(snapshot.server_models),
            )
        )
    return metrics


def metrics_frame(metrics: Sequence[EpochMetrics]) -> pd.DataFrame:
    """Metrics as a table with exactly the CSV columns."""
    frame = pd.DataFrame([m.as_row() for m in metrics], columns=METRICS_COLUMNS)
    return frame.astype({"epoch": "int64"}) if len(frame) else frame


def _write_frame(
    frame: pd.DataFrame,
    path: str | Path,
    fmt: CsvFormat = "csv",
) -> Path:
    output = Path(path)
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "gnuplot":
            with open(output, "w", encoding="utf-8", newline="") as f:
                f.write("# " + " ".join(frame.columns) + "\n")
                frame.to_csv(
                    f,
                    sep=" ",
                    header=False,
                    index=False,
                    float_format=FLOAT_FORMAT,
                    na_rep="nan",
                    lineterminator="\n",
                )
        else:
            frame.to_csv(
                output, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
            )
    except OSError as e:
        raise ArtifactWriteError(f"Could not write {output}: {e}") from e
    return output


def export_csv(
    metrics: Sequence[EpochMetrics],
    path: str | Path,
    fmt: CsvFormat = "csv",
) -> Path:
    """Write metrics with one row per epoch.

    Columns are ``epoch,consensus_err_max,consensus_err_mean,gap_max,gap_avg,
    lemma1_bound,lemma4_bound,epsilon,objective``. ``fmt="gnuplot"`` writes
    the same table whitespace-separated with a ``#`` header line.

    Raises:
        ArtifactWriteError: If the file cannot be written
    """
    output = _write_frame(metrics_frame(metrics), path, fmt)
    logger.info(f"Wrote {len(metrics)} epochs of metrics to {output}")
    return output


def load_metrics(path: str | Path) -> pd.DataFrame:
    """Parse a metrics CSV written by :func:`export_csv` without precision loss."""
    source = Path(path)
    if not source.exists():
        raise RejectedInputError(f"Metrics file not found: {source}")
    return pd.read_csv(source, float_precision="round_trip")


def models_frame(server_models: np.ndarray) -> pd.DataFrame:
    """Server models as a ``server,w1..wd`` table."""
    models = np.asarray(server_models, dtype=np.float64)
    frame = pd.DataFrame(models, columns=[f"w{k}" for k in range(1, models.shape[1] + 1)])
    frame.insert(0, "server", np.arange(1, models.shape[0] + 1))
    return frame


def export_models_csv(server_models: np.ndarray, path: str | Path) -> Path:
    """Write final server models as ``server,w1,...,wd``."""
    output = _write_frame(models_frame(server_models), path)
    logger.info(f"Wrote {len(server_models)} server models to {output}")
    return output


def iterates_frame(record: TrajectoryRecord) -> pd.DataFrame:
    """Logged consensus iterates as an ``epoch,step,server,w1..wd`` table.

    Step 0 is the model right after aggregation; steps 1..T_S follow each
    consensus iteration. Epochs without an iterate log are skipped.
    """
    rows: list[list[float]] = []
    dim = record.snapshots[0].server_models.shape[1] if record.snapshots else 0
    for snapshot in record.snapshots:
        if snapshot.consensus_iterates is None:
            continue
        for step, models in enumerate(snapshot.consensus_iterates):
            for server, w in enumerate(models, 1):
                rows.append([snapshot.epoch, step, server, *w.tolist()])
    columns = ["epoch", "step", "server"] + [f"w{k}" for k in range(1, dim + 1)]
    frame = pd.DataFrame(rows, columns=columns)
    return frame.astype({"epoch": "int64", "step": "int64", "server": "int64"})


def export_iterates_csv(record: TrajectoryRecord, path: str | Path) -> Path:
    """Write the consensus iterate log of a run."""
    frame = iterates_frame(record)
    output = _write_frame(frame, path)
    logger.info(f"Wrote {len(frame)} consensus iterates to {output}")
    return output


def final_summary(metrics: Sequence[EpochMetrics]) -> dict[str, float | int | None]:
    """Key figures of the last epoch."""
    last = metrics[-1]
    return {
        "epoch": last.epoch,
        "consensus_err_max": last.consensus_error,
        "gap_max": last.optimality_gap,
        "gap_avg": last.avg_gap,
        "deviation_norm": last.deviation_norm,
        "epsilon": last.epsilon,
    }


def consensus_reached_at(metrics: Sequence[EpochMetrics], threshold: float) -> int | None:
    """First epoch whose consensus error falls below ``threshold``."""
    for m in metrics:
        if m.consensus_error < threshold:
            return m.epoch
    return None
