"""Server communication graph and consensus weights.

The servers talk over an undirected graph. This module validates that graph,
builds the doubly-stochastic mixing matrix used for consensus (Metropolis
weights by default, or a user-supplied matrix checked against the same
properties) and computes the per-epoch contraction factor
σ_A = ‖A^{T_S} − (1/M)11'‖.
"""

import logging
import random
from collections.abc import Callable, Iterable
from pathlib import Path
from typing import Any

import networkx as nx
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dfl_toolkit.errors import (
    AssumptionViolationError,
    RejectedInputError,
)

logger = logging.getLogger(__name__)

STOCHASTIC_TOLERANCE = 1e-12
MAX_CONNECT_ATTEMPTS = 10_000


class ServerGraph(BaseModel):
    """Undirected communication graph between M servers.

    Servers are numbered 1..M and every edge is stored as an ordered pair
    ``(i, j)`` with ``i < j``.

    Attributes:
        num_servers: Number of servers M
        edges: Undirected edges without self-loops or duplicates
    """

    model_config = ConfigDict(frozen=True)

    num_servers: int = Field(ge=1, description="Number of servers M")
    edges: tuple[tuple[int, int], ...] = Field(default=(), description="Undirected edges")

    @field_validator("edges", mode="before")
    @classmethod
    def _normalize_edges(cls, value: Any) -> tuple[tuple[int, int], ...]:
        normalized: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        for raw in value:
            i, j = (int(v) for v in raw)
            if i == j:
                raise ValueError(f"self-loop on server {i} is not allowed")
            edge = (min(i, j), max(i, j))
            if edge in seen:
                raise ValueError(f"duplicate edge {edge}")
            seen.add(edge)
            normalized.append(edge)
        return tuple(sorted(normalized))

    @model_validator(mode="after")
    def _check_indices(self) -> "ServerGraph":
        for i, j in self.edges:
            if i < 1 or j > self.num_servers:
                raise ValueError(
                    f"edge ({i}, {j}) references a server outside 1..{self.num_servers}"
                )
        return self

    def neighbors(self, server: int) -> tuple[int, ...]:
        """Return the sorted neighbour set N_i of a 1-based server index."""
        found = [j if i == server else i for i, j in self.edges if server in (i, j)]
        return tuple(sorted(found))

    def degree(self, server: int) -> int:
        """Return the number of neighbours of a server."""
        return len(self.neighbors(server))

    def to_networkx(self) -> nx.Graph:
        """Return the graph as a networkx graph on nodes 1..M."""
        graph = nx.Graph()
        graph.add_nodes_from(range(1, self.num_servers + 1))
        graph.add_edges_from(self.edges)
        return graph

    @classmethod
    def from_networkx(cls, graph: nx.Graph) -> "ServerGraph":
        """Build from a networkx graph whose nodes are 0..M-1, dropping self-loops."""
        edges = {(min(u, v) + 1, max(u, v) + 1) for u, v in graph.edges() if u != v}
        return cls(num_servers=graph.number_of_nodes(), edges=sorted(edges))


def is_connected(graph: ServerGraph) -> bool:
    """Check whether every server is reachable from server 1."""
    return bool(nx.is_connected(graph.to_networkx()))


def complete_graph(num_servers: int) -> ServerGraph:
    """Every pair of servers is linked."""
    return ServerGraph.from_networkx(nx.complete_graph(num_servers))


def cycle_graph(num_servers: int) -> ServerGraph:
    """Servers on a ring; a single edge for two servers, none for one."""
    if num_servers < 3:
        return path_graph(num_servers)
    return ServerGraph.from_networkx(nx.cycle_graph(num_servers))


def path_graph(num_servers: int) -> ServerGraph:
    """Servers on a line."""
    return ServerGraph.from_networkx(nx.path_graph(num_servers))


def star_graph(num_servers: int) -> ServerGraph:
    """Server 1 is linked to every other server."""
    return ServerGraph.from_networkx(nx.star_graph(num_servers - 1))


def erdos_renyi_graph(num_servers: int, edge_probability: float, seed: int) -> ServerGraph:
    """Sample G(M, p) graphs until one is connected.

    Args:
        num_servers: Number of servers M
        edge_probability: Probability p of each edge
        seed: Seed of the sampling stream

    Returns:
        The first connected sample

    Raises:
        AssumptionViolationError: If no connected graph was found
    """
    if not 0.0 <= edge_probability <= 1.0:
        raise RejectedInputError(f"edge probability must lie in [0, 1], got {edge_probability}")
    rng = random.Random(seed)
    for attempt in range(1, MAX_CONNECT_ATTEMPTS + 1):
        sample = nx.gnp_random_graph(num_servers, edge_probability, seed=rng)
        if nx.is_connected(sample):
            logger.debug(f"Connected G({num_servers}, {edge_probability}) after {attempt} draws")
            return ServerGraph.from_networkx(sample)
    raise AssumptionViolationError(
        f"No connected G({num_servers}, {edge_probability}) graph found in "
        f"{MAX_CONNECT_ATTEMPTS} draws"
    )


GRAPH_GENERATORS: dict[str, Callable[..., ServerGraph]] = {
    "complete": complete_graph,
    "cycle": cycle_graph,
    "path": path_graph,
    "star": star_graph,
    "erdos-renyi": erdos_renyi_graph,
}


def build_graph(name: str, num_servers: int, **params: Any) -> ServerGraph:
    """Build a graph with one of the named generators.

    Args:
        name: One of ``complete``, ``cycle``, ``path``, ``star``, ``erdos-renyi``
        num_servers: Number of servers M
        **params: Extra generator parameters (``edge_probability``, ``seed``)

    Returns:
        The generated graph

    Raises:
        RejectedInputError: If the generator name is unknown
    """
    try:
        generator = GRAPH_GENERATORS[name]
    except KeyError as e:
        known = ", ".join(sorted(GRAPH_GENERATORS))
        raise RejectedInputError(f"Unknown graph generator '{name}' (known: {known})") from e
    return generator(num_servers, **params)


def parse_edge_list(lines: Iterable[str], num_servers: int | None = None) -> ServerGraph:
    """Parse ``i j`` pairs (1-indexed), one per line; blank and ``#`` lines are skipped.

    Args:
        lines: Text lines of the edge list
        num_servers: Number of servers; inferred from the largest index when omitted

    Returns:
        The parsed graph

    Raises:
        RejectedInputError: If a line is malformed or the graph is invalid
    """
    edges: list[tuple[int, int]] = []
    for number, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise RejectedInputError(f"Edge list line {number}: expected 'i j', got '{text}'")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError as e:
            raise RejectedInputError(f"Edge list line {number}: non-integer index") from e

    if num_servers is None:
        num_servers = max((max(edge) for edge in edges), default=1)
    try:
        return ServerGraph(num_servers=num_servers, edges=edges)
    except ValueError as e:
        raise RejectedInputError(f"Invalid edge list: {e}") from e


def load_edge_list(path: str | Path, num_servers: int | None = None) -> ServerGraph:
    """Read an edge-list file.

    Raises:
        RejectedInputError: If the file is missing or malformed
    """
    edge_file = Path(path)
    if not edge_file.exists():
        raise RejectedInputError(f"Edge list file not found: {edge_file}")
    with open(edge_file, encoding="utf-8") as f:
        return parse_edge_list(f, num_servers)


class MixingMatrix(BaseModel):
    """Doubly-stochastic consensus weights supported on the graph.

    Attributes:
        entries: The M×M weight matrix A (read-only)
        alpha: Lower bound on every supported entry
        graph: Graph whose edges (plus self-loops) support A
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    entries: np.ndarray
    alpha: float = Field(gt=0, lt=1, description="Lower bound on supported entries")
    graph: ServerGraph

    @property
    def size(self) -> int:
        """Number of servers M."""
        return int(self.entries.shape[0])

    @property
    def is_symmetric(self) -> bool:
        """Whether A equals its transpose exactly."""
        return bool(np.array_equal(self.entries, self.entries.T))

    def support(self) -> tuple[tuple[int, ...], ...]:
        """Per row, the 0-based columns of N_i ∪ {i} in ascending order."""
        return tuple(
            tuple(int(j) for j in np.flatnonzero(row)) for row in self.entries
        )


def _support_mask(graph: ServerGraph) -> NDArray[np.bool_]:
    mask = np.eye(graph.num_servers, dtype=bool)
    for i, j in graph.edges:
        mask[i - 1, j - 1] = True
        mask[j - 1, i - 1] = True
    return mask


def validate_mixing_matrix(entries: Any, graph: ServerGraph) -> MixingMatrix:
    """Check a weight matrix against the consensus-weight properties.

    The matrix must be non-negative, vanish off the graph's support, be
    strictly positive on the support (including the diagonal) and have unit
    row and column sums.

    Args:
        entries: Candidate M×M matrix
        graph: Server graph supporting the matrix

    Returns:
        The validated mixing matrix, with alpha set just below its smallest
        supported entry

    Raises:
        AssumptionViolationError: If the graph is disconnected or a property fails
    """
    matrix = np.array(entries, dtype=np.float64)
    size = graph.num_servers
    if matrix.shape != (size, size):
        raise AssumptionViolationError(
            f"Mixing matrix must be {size}x{size}, got shape {matrix.shape}"
        )
    if not is_connected(graph):
        raise AssumptionViolationError("The server graph is not connected")
    if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
        raise AssumptionViolationError("Mixing weights must be finite and non-negative")

    mask = _support_mask(graph)
    if np.any(matrix[~mask] != 0):
        raise AssumptionViolationError("Mixing matrix has weight between non-neighbours")
    supported = matrix[mask]
    if np.any(supported <= 0):
        raise AssumptionViolationError(
            "Every neighbour and self weight must be strictly positive"
        )
    row_error = float(np.max(np.abs(matrix.sum(axis=1) - 1.0)))
    col_error = float(np.max(np.abs(matrix.sum(axis=0) - 1.0)))
    if row_error > STOCHASTIC_TOLERANCE or col_error > STOCHASTIC_TOLERANCE:
        raise AssumptionViolationError(
            f"Mixing matrix is not doubly stochastic "
            f"(row error {row_error:.3e}, column error {col_error:.3e})"
        )

    alpha = float(supported.min()) - 1e-12
    if alpha <= 0:
        raise AssumptionViolationError("Smallest supported weight is too close to zero")
    matrix.flags.writeable = False
    return MixingMatrix(entries=matrix, alpha=min(alpha, 1.0 - 1e-12), graph=graph)


def metropolis_weights(graph: ServerGraph) -> MixingMatrix:
    """Build Metropolis–Hastings weights on a connected graph.

    ``a_ij = 1/(1 + max(deg i, deg j))`` on edges and
    ``a_ii = 1 − Σ_{j∈N_i} a_ij``. The result is symmetric and doubly
    stochastic.

    Raises:
        AssumptionViolationError: If the graph is disconnected
    """
    if not is_connected(graph):
        raise AssumptionViolationError(
            f"Cannot build consensus weights: the {graph.num_servers}-server graph "
            "is not connected"
        )
    size = graph.num_servers
    degrees = [graph.degree(i) for i in range(1, size + 1)]
    matrix = np.zeros((size, size))
    for i, j in graph.edges:
        weight = 1.0 / (1 + max(degrees[i - 1], degrees[j - 1]))
        matrix[i - 1, j - 1] = weight
        matrix[j - 1, i - 1] = weight
    for i in range(size):
        matrix[i, i] = 1.0 - matrix[i].sum()
    return validate_mixing_matrix(matrix, graph)


def load_mixing_matrix(path: str | Path, graph: ServerGraph) -> MixingMatrix:
    """Read a whitespace- or comma-separated M×M matrix and validate it.

    Raises:
        RejectedInputError: If the file is missing or unreadable
        AssumptionViolationError: If the matrix fails validation
    """
    matrix_file = Path(path)
    if not matrix_file.exists():
        raise RejectedInputError(f"Mixing matrix file not found: {matrix_file}")
    text = matrix_file.read_text(encoding="utf-8").replace(",", " ")
    try:
        rows = [
            [float(v) for v in line.split()]
            for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
        matrix = np.array(rows, dtype=np.float64)
    except ValueError as e:
        raise RejectedInputError(f"Unreadable mixing matrix {matrix_file}: {e}") from e
    logger.info(f"Loaded {matrix.shape} mixing matrix from {matrix_file}")
    return validate_mixing_matrix(matrix, graph)


def contraction_factor(mixing: MixingMatrix, t_s: int) -> float:
    """Return σ_A = ‖A^{T_S} − (1/M)11'‖₂.

    Args:
        mixing: Validated mixing matrix
        t_s: Number of consensus iterations per epoch

    Returns:
        The spectral norm, in [0, 1) for connected graphs

    Raises:
        RejectedInputError: If t_s < 1
    """
    if t_s < 1:
        raise RejectedInputError(f"T_S must be at least 1, got {t_s}")
    size = mixing.size
    deviation = np.linalg.matrix_power(mixing.entries, t_s) - np.full((size, size), 1.0 / size)
    return float(np.linalg.norm(deviation, 2))
