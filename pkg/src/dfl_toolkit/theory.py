"""Closed-form convergence constants and bounds.

Given the smoothness constants of the client losses, the mixing matrix, the
epoch schedule and the step size, this module evaluates:

- the step-size gate ``γ < min{1/(L·T_C), 1/(μ·T_C)}``,
- the gradient-step contraction ``λ = √(1 − ημ)`` for ``η ≤ 1/L``,
- the server-to-average deviation bound
  ``σ_A^p·δ_0 + √M·T_C·θ·γ·σ_A/(1 − σ_A)``,
- the client drift bound ``γ·T_C·θ``,
- the average-to-optimum bound ``Λ^p·‖w̄_0 − w*‖ + Y_0/(1 − Λ)``,
- the limiting tolerance ε,

and checks simulated trajectories against all of them.
"""

import logging
import math
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from dfl_toolkit.errors import PreconditionError, RejectedInputError
from dfl_toolkit.losses import ModelParams, SmoothnessConstants
from dfl_toolkit.topology import MixingMatrix, contraction_factor

if TYPE_CHECKING:
    from dfl_toolkit.engine import TrajectoryRecord

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9
TRANSIENT_FLOOR = 1e-12
MAX_REPORTED_VIOLATIONS = 10


class TheoryBounds(BaseModel):
    """Every constant entering the convergence bounds of one configuration.

    Attributes:
        sigma_a: Per-epoch contraction factor ‖A^{T_S} − (1/M)11'‖
        lam: Single-step gradient contraction √(1 − γμ)
        capital_lambda: Per-epoch contraction Λ = √(1 − γμT_C)
        y0: Constant Y_0 of the average-to-optimum bound
        epsilon: Limiting tolerance ε (infinite when Λ = 1)
        delta0: Initial disagreement ‖W_0 − 1w̄_0'‖
        initial_avg_gap: Initial distance ‖w̄_0 − w*‖
        constants: Smoothness constants μ, L, θ
        gamma: Step size γ
        t_c: Client iterations per epoch
        t_s: Server iterations per epoch
        m: Number of servers
    """

    model_config = ConfigDict(frozen=True)

    sigma_a: float = Field(ge=0)
    lam: float = Field(ge=0)
    capital_lambda: float = Field(ge=0)
    y0: float = Field(ge=0)
    epsilon: float = Field(ge=0)
    delta0: float = Field(ge=0)
    initial_avg_gap: float = Field(ge=0)
    constants: SmoothnessConstants
    gamma: float = Field(ge=0)
    t_c: int = Field(ge=1)
    t_s: int = Field(ge=1)
    m: int = Field(ge=1)


def max_step_size(constants: SmoothnessConstants, t_c: int) -> float:
    """Return the step-size gate min(1/(L·T_C), 1/(μ·T_C))."""
    if t_c < 1:
        raise RejectedInputError(f"T_C must be at least 1, got {t_c}")
    return min(1.0 / (constants.L * t_c), 1.0 / (constants.mu * t_c))


def lemma2_factor(eta: float, constants: SmoothnessConstants) -> float:
    """Return the gradient-step contraction √(1 − η·μ).

    For an L-smooth, μ-strongly convex f and 0 ≤ η ≤ 1/L,
    ‖w − v − η(∇f(w) − ∇f(v))‖ ≤ √(1 − ημ)·‖w − v‖.

    Raises:
        PreconditionError: If η lies outside [0, 1/L]
    """
    if eta < 0 or eta > 1.0 / constants.L:
        raise PreconditionError(
            f"Gradient-step contraction needs 0 <= eta <= 1/L = {1.0 / constants.L:.6g}, "
            f"got {eta:.6g}"
        )
    return math.sqrt(max(0.0, 1.0 - eta * constants.mu))


def server_deviation_bound(bounds: TheoryBounds, p: int) -> float:
    """Bound on ‖w^i_p − w̄_p‖ after epoch p."""
    if bounds.sigma_a >= 1:
        raise PreconditionError(f"sigma_A must be below 1, got {bounds.sigma_a}")
    steady = (
        math.sqrt(bounds.m)
        * bounds.t_c
        * bounds.constants.theta
        * bounds.gamma
        * bounds.sigma_a
        / (1.0 - bounds.sigma_a)
    )
    return bounds.sigma_a**p * bounds.delta0 + steady


def client_drift_bound(gamma: float, t_c: int, theta: float) -> float:
    """Bound γ·T_C·θ on how far a client strays from its server within an epoch."""
    return gamma * t_c * theta


def average_optimality_bound(bounds: TheoryBounds, p: int) -> float:
    """Bound on ‖w̄_p − w*‖ after epoch p.

    Raises:
        PreconditionError: If γ ≥ 1/(μ·T_C)
    """
    if bounds.gamma * bounds.constants.mu * bounds.t_c >= 1:
        raise PreconditionError(
            f"Average-to-optimum bound needs gamma < 1/(mu*T_C) = "
            f"{1.0 / (bounds.constants.mu * bounds.t_c):.6g}, got {bounds.gamma:.6g}"
        )
    steady = bounds.y0 / (1.0 - bounds.capital_lambda) if bounds.y0 else 0.0
    return bounds.capital_lambda**p * bounds.initial_avg_gap + steady


def epsilon_bound(bounds: TheoryBounds) -> float:
    """Limiting tolerance ε = √M·γ·θ·T_C·σ_A/(1 − σ_A) + Y_0/(1 − Λ).

    Raises:
        PreconditionError: If σ_A ≥ 1 or Λ ≥ 1
    """
    if bounds.sigma_a >= 1 or bounds.capital_lambda >= 1:
        raise PreconditionError(
            f"epsilon needs sigma_A < 1 and Lambda < 1, got sigma_A={bounds.sigma_a}, "
            f"Lambda={bounds.capital_lambda}"
        )
    consensus_term = (
        math.sqrt(bounds.m)
        * bounds.gamma
        * bounds.constants.theta
        * bounds.t_c
        * bounds.sigma_a
        / (1.0 - bounds.sigma_a)
    )
    return consensus_term + bounds.y0 / (1.0 - bounds.capital_lambda)


def disagreement(models: NDArray[np.float64]) -> float:
    """Spectral norm ‖W − 1w̄'‖ of a stack of server models (one per row)."""
    centered = models - models.mean(axis=0)
    return float(np.linalg.norm(centered, 2))


def compute_bounds(
    constants: SmoothnessConstants,
    mixing: MixingMatrix,
    t_c: int,
    t_s: int,
    gamma: float,
    initial_models: NDArray[np.float64],
    w_star: ModelParams,
) -> TheoryBounds:
    """Evaluate every bound constant of one configuration.

    Args:
        constants: Smoothness constants of the client losses
        mixing: Consensus weights
        t_c: Client iterations per epoch
        t_s: Server iterations per epoch
        gamma: Step size
        initial_models: Initial server models W_0, one row per server
        w_star: Exact optimum of the global objective

    Returns:
        The assembled bounds

    Raises:
        PreconditionError: If γ > 1/L or γ ≥ 1/(μ·T_C)
    """
    if gamma < 0:
        raise RejectedInputError(f"step size must be non-negative, got {gamma}")
    models = np.asarray(initial_models, dtype=np.float64)
    if models.shape[0] != mixing.size:
        raise RejectedInputError(
            f"{models.shape[0]} initial models for {mixing.size} servers"
        )
    if gamma * constants.mu * t_c >= 1:
        raise PreconditionError(
            f"Bounds need gamma < 1/(mu*T_C) = {1.0 / (constants.mu * t_c):.6g}, "
            f"got {gamma:.6g}"
        )

    sigma_a = contraction_factor(mixing, t_s)
    lam = lemma2_factor(gamma, constants)
    capital_lambda = math.sqrt(1.0 - gamma * constants.mu * t_c)
    delta0 = disagreement(models)
    offset = models.mean(axis=0) - w_star
    initial_avg_gap = float(np.sqrt(offset @ offset))
    step = gamma * t_c
    num_servers = mixing.size
    y0 = (
        step**2 * constants.theta * constants.L
        + step**2
        * constants.theta
        * constants.L
        * math.sqrt(num_servers)
        * sigma_a
        / (1.0 - sigma_a)
        + step * constants.L * delta0
    )

    partial = TheoryBounds(
        sigma_a=sigma_a,
        lam=lam,
        capital_lambda=capital_lambda,
        y0=y0,
        epsilon=math.inf,
        delta0=delta0,
        initial_avg_gap=initial_avg_gap,
        constants=constants,
        gamma=gamma,
        t_c=t_c,
        t_s=t_s,
        m=num_servers,
    )
    if capital_lambda >= 1:
        logger.warning("Step size is zero: Lambda = 1, epsilon is unbounded")
        return partial
    bounds = partial.model_copy(update={"epsilon": epsilon_bound(partial)})
    logger.info(
        f"Bounds: sigma_A={sigma_a:.6g}, Lambda={capital_lambda:.6g}, "
        f"Y0={y0:.6g}, epsilon={bounds.epsilon:.6g}"
    )
    return bounds


class BoundReport(BaseModel):
    """Outcome of checking a trajectory against the bounds.

    Attributes:
        certified: Whether the checks apply (trajectory stayed in the θ region)
        reason: Why the run is not certified, if it is not
        epochs_checked: Number of snapshots checked
        max_drift: Largest observed client drift
        drift_bound: γ·T_C·θ
        limit_checked: Whether the transient terms were small enough to test ε
        violations: Human-readable descriptions of failed checks
    """

    certified: bool
    reason: str | None = None
    epochs_checked: int = 0
    max_drift: float = 0.0
    drift_bound: float = 0.0
    limit_checked: bool = False
    violations: list[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        """True when no certified check failed."""
        return not self.violations


def verify_trajectory(
    record: "TrajectoryRecord",
    bounds: TheoryBounds,
    slack: float = BOUND_SLACK,
) -> BoundReport:
    """Check every epoch of a run against the convergence bounds.

    Checks server deviation from the average, client drift, average distance
    to the optimum, per-server distance to the optimum (sum of the first and
    third bounds) and, once the transient terms have decayed below
    ``TRANSIENT_FLOOR``, the limiting tolerance ε.

    Args:
        record: Completed trajectory with a reference optimum
        bounds: Bounds of the run's configuration
        slack: Additive floating-point slack

    Returns:
        The report; uncertified runs are reported without checks
    """
    if record.w_star is None:
        raise RejectedInputError("trajectory has no reference optimum to check against")
    if not record.in_region:
        logger.warning("Trajectory left the certification region; bounds not checked")
        return BoundReport(
            certified=False,
            reason="an iterate left the region on which theta is certified",
            epochs_checked=len(record.snapshots),
        )

    violations: list[str] = []
    w_star = record.w_star
    drift_bound = client_drift_bound(bounds.gamma, bounds.t_c, bounds.constants.theta)
    max_drift = max(s.max_client_drift for s in record.snapshots)
    if max_drift > drift_bound + slack:
        violations.append(f"client drift {max_drift:.17g} exceeds {drift_bound:.17g}")

    for snapshot in record.snapshots:
        p = snapshot.epoch
        deviation = server_deviation_bound(bounds, p)
        optimality = average_optimality_bound(bounds, p)
        consensus_error = float(np.max(snapshot.consensus_errors))
        offset = snapshot.average - w_star
        avg_gap = float(np.sqrt(offset @ offset))
        gaps = snapshot.server_models - w_star
        gap_max = float(np.max(np.sqrt(np.einsum("ij,ij->i", gaps, gaps))))
        if consensus_error > deviation + slack:
            violations.append(
                f"epoch {p}: consensus error {consensus_error:.17g} exceeds {deviation:.17g}"
            )
        if avg_gap > optimality + slack:
            violations.append(
                f"epoch {p}: average gap {avg_gap:.17g} exceeds {optimality:.17g}"
            )
        if gap_max > deviation + optimality + slack:
            violations.append(
                f"epoch {p}: server gap {gap_max:.17g} exceeds {deviation + optimality:.17g}"
            )

    final = record.snapshots[-1]
    p = final.epoch
    transient = max(
        bounds.sigma_a**p * bounds.delta0,
        bounds.capital_lambda**p * bounds.initial_avg_gap,
    )
    limit_checked = math.isfinite(bounds.epsilon) and transient < TRANSIENT_FLOOR
    if limit_checked:
        gaps = final.server_models - w_star
        gap_max = float(np.max(np.sqrt(np.einsum("ij,ij->i", gaps, gaps))))
        if gap_max > bounds.epsilon + slack:
            violations.append(
                f"final server gap {gap_max:.17g} exceeds epsilon {bounds.epsilon:.17g}"
            )

    if violations:
        logger.error(f"{len(violations)} bound violations on a certified run")
    return BoundReport(
        certified=True,
        epochs_checked=len(record.snapshots),
        max_drift=max_drift,
        drift_bound=drift_bound,
        limit_checked=limit_checked,
        violations=violations[:MAX_REPORTED_VIOLATIONS],
    )
