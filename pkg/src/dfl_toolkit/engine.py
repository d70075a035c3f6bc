"""Synchronous execution of the alternating client/server training loop.

One epoch is:

1. every client of every server takes T_C full-batch gradient steps from its
   server's model,
2. each server replaces its model by the average of its clients' models,
3. the servers run T_S synchronous consensus iterations W ← A·W,
4. each server pushes its model back to its clients.

All reductions run in ascending index order, so serial and parallel client
phases produce bit-identical trajectories.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from dfl_toolkit.errors import (
    ConfigurationError,
    NumericOverflowError,
    PreconditionError,
    RejectedInputError,
)
from dfl_toolkit.losses import LossModel, ModelParams, SmoothnessConstants
from dfl_toolkit.theory import max_step_size
from dfl_toolkit.topology import MixingMatrix

logger = logging.getLogger(__name__)


class EpochSchedule(BaseModel):
    """Iteration counts of one epoch.

    Attributes:
        t_c: Client gradient iterations per epoch
        t_s: Server consensus iterations per epoch
    """

    model_config = ConfigDict(frozen=True)

    t_c: int = Field(ge=1, description="Client iterations per epoch")
    t_s: int = Field(ge=1, description="Server iterations per epoch")

    @property
    def t_e(self) -> int:
        """Total iterations per epoch."""
        return self.t_c + self.t_s


@dataclass
class ClientState:
    """A client's local model and loss.

    The ``max_drift`` and ``max_center_distance`` fields describe the most
    recent client phase; ``iterates`` is filled only when iterate logging is on.
    """

    w: ModelParams
    model: LossModel
    max_drift: float = 0.0
    max_center_distance: float = 0.0
    iterates: list[ModelParams] | None = None

    @property
    def server_id(self) -> int:
        return self.model.server_id

    @property
    def client_id(self) -> int:
        return self.model.client_id


@dataclass
class ServerState:
    """A server's model, its clients and its graph neighbours (1-based)."""

    index: int
    w: ModelParams
    clients: list[ClientState]
    neighbors: tuple[int, ...] = ()


@dataclass
class FederationState:
    """Everything the engine needs to advance the federation.

    Attributes:
        servers: Server states, ordered by server index
        mixing: Consensus weights
        schedule: Epoch schedule
        gamma: Client step size
        epoch: Number of completed epochs
        constants: Smoothness constants; enables the step-size gate and region tracking
        w_star: Exact optimum, used for optimality gaps in snapshots
        record_iterates: Keep per-iteration logs in every snapshot
    """

    servers: list[ServerState]
    mixing: MixingMatrix
    schedule: EpochSchedule
    gamma: float
    epoch: int = 0
    constants: SmoothnessConstants | None = None
    w_star: ModelParams | None = None
    record_iterates: bool = False
    _support: tuple[tuple[int, ...], ...] = field(default=(), init=False, repr=False)

    def __post_init__(self) -> None:
        if self.gamma < 0 or not math.isfinite(self.gamma):
            raise RejectedInputError(f"step size must be finite and non-negative, got {self.gamma}")
        if self.mixing.size != len(self.servers):
            raise RejectedInputError(
                f"mixing matrix is {self.mixing.size}x{self.mixing.size} "
                f"but there are {len(self.servers)} servers"
            )
        self._support = self.mixing.support()

    @property
    def num_servers(self) -> int:
        return len(self.servers)

    @property
    def dim(self) -> int:
        return int(self.servers[0].w.shape[0])

    def server_models(self) -> NDArray[np.float64]:
        """Stacked server models W, one row per server."""
        return np.stack([server.w for server in self.servers])

    def all_clients(self) -> list[ClientState]:
        return [client for server in self.servers for client in server.clients]


@dataclass
class EpochSnapshot:
    """Federation state at an epoch boundary.

    Attributes:
        epoch: Epoch index p (0 is the initial state)
        server_models: W_p, one row per server
        average: w̄_p
        consensus_errors: ‖w^i_p − w̄_p‖ per server
        optimality_gaps: ‖w^i_p − w*‖ per server, when w* is known
        max_client_drift: Largest ‖w^{ij}_s − w^i_{p−1}‖ during the epoch
        in_region: Whether every iterate so far stayed in the θ region
        average_before_consensus: w̄ right after aggregation
        average_after_consensus: w̄ right after the consensus phase
        client_models: Client models at the end of the client phase (iterate log)
        consensus_iterates: Server models after aggregation and after each
            consensus iteration, shape (T_S + 1, M, d) (iterate log)
    """

    epoch: int
    server_models: NDArray[np.float64]
    average: ModelParams
    consensus_errors: NDArray[np.float64]
    optimality_gaps: NDArray[np.float64] | None = None
    max_client_drift: float = 0.0
    in_region: bool = True
    average_before_consensus: ModelParams | None = None
    average_after_consensus: ModelParams | None = None
    client_models: list[list[ModelParams]] | None = None
    consensus_iterates: NDArray[np.float64] | None = None


@dataclass
class TrajectoryRecord:
    """Per-epoch snapshots of one run, starting with epoch 0."""

    snapshots: list[EpochSnapshot] = field(default_factory=list)
    w_star: ModelParams | None = None

    @property
    def completed_epochs(self) -> int:
        return len(self.snapshots) - 1

    @property
    def final(self) -> EpochSnapshot:
        return self.snapshots[-1]

    @property
    def in_region(self) -> bool:
        """True when no iterate ever left the θ certification region."""
        return all(snapshot.in_region for snapshot in self.snapshots)

    @property
    def max_client_drift(self) -> float:
        return max((s.max_client_drift for s in self.snapshots), default=0.0)


def _norm(v: NDArray[np.float64]) -> float:
    return math.sqrt(float(v @ v))


def client_local_update(
    client: ClientState,
    gamma: float,
    *,
    epoch: int | None = None,
    step: int | None = None,
) -> ClientState:
    """Take one gradient step ``w ← w − γ∇f^{ij}(w)`` in place.

    Args:
        client: The client to update
        gamma: Step size
        epoch: Epoch index, reported on failure
        step: Iteration within the epoch, reported on failure

    Returns:
        The updated client

    Raises:
        NumericOverflowError: If the gradient is not finite
    """
    gradient = client.model.gradient(client.w)
    if not np.all(np.isfinite(gradient)):
        raise NumericOverflowError(
            f"Non-finite gradient at client {client.client_id} of server "
            f"{client.server_id} (epoch {epoch}, step {step})",
            epoch=epoch,
            server_id=client.server_id,
            client_id=client.client_id,
            step=step,
        )
    client.w = client.w - gamma * gradient
    return client


def _train_client(
    client: ClientState,
    t_c: int,
    gamma: float,
    epoch: int,
    center: ModelParams | None,
    record_iterates: bool,
) -> ModelParams:
    start = client.w
    max_drift = 0.0
    max_center_distance = 0.0 if center is None else _norm(start - center)
    client.iterates = [start] if record_iterates else None
    for step in range(t_c):
        client_local_update(client, gamma, epoch=epoch, step=step)
        max_drift = max(max_drift, _norm(client.w - start))
        if center is not None:
            max_center_distance = max(max_center_distance, _norm(client.w - center))
        if client.iterates is not None:
            client.iterates.append(client.w)
    client.max_drift = max_drift
    client.max_center_distance = max_center_distance
    return client.w


def run_client_phase(
    server: ServerState,
    schedule: EpochSchedule,
    gamma: float,
    *,
    epoch: int = 0,
    center: ModelParams | None = None,
    executor: Executor | None = None,
    record_iterates: bool = False,
) -> list[ModelParams]:
    """Run T_C local gradient steps on every client of one server.

    Clients are independent; with an executor they run concurrently, each
    owning its own state.

    Args:
        server: Server whose clients train
        schedule: Epoch schedule
        gamma: Step size
        epoch: Epoch index, used in error reports
        center: Centre of the θ region; tracks each client's distance from it
        executor: Optional executor for concurrent clients
        record_iterates: Keep every client iterate on the client state

    Returns:
        Final client models, in client order

    Raises:
        PreconditionError: If a client does not start from the server's model
        NumericOverflowError: If a gradient is not finite
    """
    for client in server.clients:
        if not np.array_equal(client.w, server.w):
            raise PreconditionError(
                f"Client {client.client_id} of server {server.index} does not start "
                "from its server's model"
            )

    def train(client: ClientState) -> ModelParams:
        return _train_client(client, schedule.t_c, gamma, epoch, center, record_iterates)

    if executor is None:
        return [train(client) for client in server.clients]
    return list(executor.map(train, server.clients))


def aggregate(server: ServerState, client_models: Sequence[ModelParams]) -> ModelParams:
    """Average the client models, summing in client order.

    Raises:
        RejectedInputError: If the list is empty or dimensions differ
    """
    if not client_models:
        raise RejectedInputError(f"Server {server.index} received no client models")
    dim = server.w.shape[0]
    total = np.zeros(dim)
    for w in client_models:
        if w.shape != (dim,):
            raise RejectedInputError(
                f"Server {server.index} expected {dim}-dimensional models, got {w.shape}"
            )
        total = total + w
    return total / len(client_models)


def _mix_once(
    entries: NDArray[np.float64],
    support: tuple[tuple[int, ...], ...],
    models: NDArray[np.float64],
) -> NDArray[np.float64]:
    mixed = np.empty_like(models)
    for i, row in enumerate(support):
        acc = np.zeros(models.shape[1])
        for j in row:
            acc = acc + entries[i, j] * models[j]
        mixed[i] = acc
    return mixed


def run_consensus_phase(
    federation: FederationState,
    log: list[NDArray[np.float64]] | None = None,
) -> NDArray[np.float64]:
    """Apply ``W ← A·W`` T_S times and store the result on the servers.

    Each iteration reads only the previous iteration's models; every weighted
    sum runs over neighbours in ascending index order.

    Args:
        federation: Federation whose servers mix
        log: When given, receives W before the phase and after every iteration

    Returns:
        The final stacked server models, one row per server
    """
    models = federation.server_models()
    entries = federation.mixing.entries
    if log is not None:
        log.append(models)
    for _ in range(federation.schedule.t_s):
        models = _mix_once(entries, federation._support, models)
        if log is not None:
            log.append(models)
    for server, w in zip(federation.servers, models):
        server.w = w.copy()
    return models


def _snapshot(
    federation: FederationState,
    *,
    max_drift: float = 0.0,
    in_region: bool = True,
) -> EpochSnapshot:
    models = federation.server_models()
    average = models.mean(axis=0)
    centered = models - average
    errors = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    gaps = None
    if federation.w_star is not None:
        offsets = models - federation.w_star
        gaps = np.sqrt(np.einsum("ij,ij->i", offsets, offsets))
    return EpochSnapshot(
        epoch=federation.epoch,
        server_models=models,
        average=average,
        consensus_errors=errors,
        optimality_gaps=gaps,
        max_client_drift=max_drift,
        in_region=in_region,
    )


def _region(federation: FederationState) -> tuple[ModelParams | None, float]:
    if federation.constants is None:
        return None, math.inf
    center = np.asarray(federation.constants.center, dtype=np.float64)
    return center, federation.constants.region_radius


def run_epoch(federation: FederationState, executor: Executor | None = None) -> EpochSnapshot:
    """Advance the federation by one epoch.

    Client phase, per-server aggregation, consensus phase, then broadcast of
    each server model to its clients.

    Args:
        federation: Federation in post-broadcast state; updated in place
        executor: Optional executor for concurrent client phases

    Returns:
        Snapshot of the federation at the end of the epoch
    """
    epoch = federation.epoch + 1
    center, radius = _region(federation)
    record = federation.record_iterates

    client_models: list[list[ModelParams]] = []
    for server in federation.servers:
        finals = run_client_phase(
            server,
            federation.schedule,
            federation.gamma,
            epoch=epoch,
            center=center,
            executor=executor,
            record_iterates=record,
        )
        client_models.append(finals)
        server.w = aggregate(server, finals)

    clients = federation.all_clients()
    max_drift = max(client.max_drift for client in clients)
    in_region = all(client.max_center_distance <= radius for client in clients)

    average_before = federation.server_models().mean(axis=0)
    consensus_log: list[NDArray[np.float64]] | None = [] if record else None
    run_consensus_phase(federation, consensus_log)
    average_after = federation.server_models().mean(axis=0)

    for server in federation.servers:
        for client in server.clients:
            client.w = server.w.copy()
    federation.epoch = epoch

    snapshot = _snapshot(federation, max_drift=max_drift, in_region=in_region)
    snapshot.average_before_consensus = average_before
    snapshot.average_after_consensus = average_after
    if consensus_log is not None:
        snapshot.client_models = client_models
        snapshot.consensus_iterates = np.stack(consensus_log)
    logger.debug(
        f"Epoch {epoch}: consensus error {float(snapshot.consensus_errors.max()):.3e}, "
        f"max drift {max_drift:.3e}"
    )
    return snapshot


def enforce_step_gate(
    constants: SmoothnessConstants,
    t_c: int,
    gamma: float,
    override: bool = False,
) -> bool:
    """Enforce γ < min{1/(L·T_C), 1/(μ·T_C)} unless overridden.

    Returns:
        True if γ satisfies the gate, False if it does not but the gate is overridden

    Raises:
        ConfigurationError: If the step size is at or above the gate
    """
    limit = max_step_size(constants, t_c)
    if gamma < limit:
        return True
    message = (
        f"Step size {gamma:.6g} violates gamma < min{{1/(L*T_C), 1/(mu*T_C)}} "
        f"= {limit:.6g} (L={constants.L:.6g}, mu={constants.mu:.6g}, T_C={t_c})"
    )
    if not override:
        raise ConfigurationError(message)
    logger.warning(f"{message}; continuing because the gate is overridden")
    return False


def check_step_size(federation: FederationState, override: bool = False) -> None:
    """Apply :func:`enforce_step_gate` to a federation's step size.

    Raises:
        ConfigurationError: If the step size is at or above the gate
    """
    if federation.constants is None:
        logger.warning("No smoothness constants available; step-size gate not checked")
        return
    enforce_step_gate(
        federation.constants, federation.schedule.t_c, federation.gamma, override
    )


def run(
    federation: FederationState,
    num_epochs: int,
    stop_tolerance: float | None = None,
    *,
    override_step_gate: bool = False,
    workers: int = 1,
) -> TrajectoryRecord:
    """Run epochs until ``num_epochs`` or until the servers stop moving.

    Args:
        federation: Federation in post-broadcast state; updated in place
        num_epochs: Maximum number of epochs
        stop_tolerance: Stop once max_i ‖w^i_p − w^i_{p−1}‖ falls below it
        override_step_gate: Run even if the step size violates the gate
        workers: Threads for the client phase (1 runs serially)

    Returns:
        The trajectory, with the initial state as epoch 0

    Raises:
        ConfigurationError: If the step size violates the gate without override
        NumericOverflowError: If a gradient or a server model is not finite
    """
    if num_epochs < 0:
        raise RejectedInputError(f"number of epochs must be non-negative, got {num_epochs}")
    if workers < 1:
        raise RejectedInputError(f"workers must be at least 1, got {workers}")
    check_step_size(federation, override_step_gate)

    center, radius = _region(federation)
    in_region = center is None or all(
        _norm(server.w - center) <= radius for server in federation.servers
    )
    record = TrajectoryRecord(w_star=federation.w_star)
    record.snapshots.append(_snapshot(federation, in_region=in_region))

    executor: ThreadPoolExecutor | None = None
    if workers > 1:
        executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="dfl-client")
    try:
        for _ in range(num_epochs):
            previous = record.final.server_models
            snapshot = run_epoch(federation, executor)
            if not np.all(np.isfinite(snapshot.server_models)):
                raise NumericOverflowError(
                    f"Non-finite server model after epoch {snapshot.epoch}",
                    epoch=snapshot.epoch,
                )
            record.snapshots.append(snapshot)
            if not snapshot.in_region and record.snapshots[-2].in_region:
                logger.warning(
                    f"Epoch {snapshot.epoch}: an iterate left the certification region "
                    f"(radius {radius:.6g}); bound checks will be skipped"
                )
            if stop_tolerance is not None:
                moved = snapshot.server_models - previous
                movement = float(np.max(np.sqrt(np.einsum("ij,ij->i", moved, moved))))
                if movement < stop_tolerance:
                    logger.info(
                        f"Stopping after epoch {snapshot.epoch}: servers moved "
                        f"{movement:.3e} < {stop_tolerance:.3e}"
                    )
                    break
    finally:
        if executor is not None:
            executor.shutdown()

    logger.info(
        f"Run finished after {record.completed_epochs} epochs; final consensus error "
        f"{float(record.final.consensus_errors.max()):.3e}"
    )
    return record


def build_federation(
    models: Sequence[LossModel],
    mixing: MixingMatrix,
    schedule: EpochSchedule,
    gamma: float,
    initial_models: NDArray[np.float64],
    *,
    constants: SmoothnessConstants | None = None,
    w_star: ModelParams | None = None,
    record_iterates: bool = False,
) -> FederationState:
    """Assemble a post-broadcast federation from client losses.

    Clients are grouped by the server index of their dataset and every client
    starts from its server's initial model.

    Args:
        models: Loss model of every client
        mixing: Consensus weights over M servers
        schedule: Epoch schedule
        gamma: Step size
        initial_models: Initial server models, one row per server
        constants: Smoothness constants (step-size gate and θ region)
        w_star: Exact optimum for optimality gaps
        record_iterates: Keep per-iteration logs

    Returns:
        The federation at epoch 0

    Raises:
        RejectedInputError: If servers are missing clients or shapes disagree
    """
    initial = np.asarray(initial_models, dtype=np.float64)
    num_servers = mixing.size
    if initial.ndim != 2 or initial.shape[0] != num_servers:
        raise RejectedInputError(
            f"Expected {num_servers} initial models, got array of shape {initial.shape}"
        )
    dim = initial.shape[1]

    grouped: dict[int, list[LossModel]] = {i: [] for i in range(1, num_servers + 1)}
    for model in models:
        if model.server_id not in grouped:
            raise RejectedInputError(
                f"Client {model.client_id} belongs to server {model.server_id}, "
                f"outside 1..{num_servers}"
            )
        if model.dim != dim:
            raise RejectedInputError(
                f"Client {model.client_id} of server {model.server_id} has dimension "
                f"{model.dim}, expected {dim}"
            )
        grouped[model.server_id].append(model)

    servers = []
    for index, members in grouped.items():
        if not members:
            raise RejectedInputError(f"Server {index} has no clients")
        members.sort(key=lambda m: m.client_id)
        w = initial[index - 1].copy()
        clients = [ClientState(w=w.copy(), model=member) for member in members]
        servers.append(
            ServerState(
                index=index,
                w=w,
                clients=clients,
                neighbors=mixing.graph.neighbors(index),
            )
        )
    logger.info(
        f"Built federation: {num_servers} servers, {len(models)} clients, d={dim}, "
        f"T_C={schedule.t_c}, T_S={schedule.t_s}, gamma={gamma:.6g}"
    )
    return FederationState(
        servers=servers,
        mixing=mixing,
        schedule=schedule,
        gamma=gamma,
        constants=constants,
        w_star=None if w_star is None else np.asarray(w_star, dtype=np.float64),
        record_iterates=record_iterates,
    )
