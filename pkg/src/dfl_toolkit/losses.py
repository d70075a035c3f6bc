"""Client risk functions and the analysis constants derived from them.

This module holds the per-client datasets, the quadratic loss models built on
them (least squares and ridge), the federation-wide objective that averages
them, and the estimation of the strong-convexity, smoothness and
gradient-bound constants used by the convergence analysis.
"""

import logging
from collections import Counter
from collections.abc import Sequence
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dfl_toolkit.errors import AssumptionViolationError, RejectedInputError

logger = logging.getLogger(__name__)

ModelParams = NDArray[np.float64]

# Relative eigenvalue floor below which a Hessian is treated as singular.
SINGULAR_TOLERANCE = 1e-12


def as_params(w: Any, dim: int | None = None) -> ModelParams:
    """Convert a vector-like value to a float parameter vector.

    Args:
        w: Anything numpy can turn into a 1-D float array
        dim: Expected dimension, checked when given

    Returns:
        The parameter vector as a float64 array

    Raises:
        RejectedInputError: If the value is not 1-D or has the wrong dimension
    """
    params = np.asarray(w, dtype=np.float64)
    if params.ndim != 1:
        raise RejectedInputError(f"Model parameters must be a vector, got shape {params.shape}")
    if dim is not None and params.shape[0] != dim:
        raise RejectedInputError(
            f"Dimension mismatch: expected {dim} parameters, got {params.shape[0]}"
        )
    return params


class DataPoint(BaseModel):
    """A single labeled sample.

    Attributes:
        x: Feature vector
        y: Scalar label
    """

    model_config = ConfigDict(allow_inf_nan=False, frozen=True)

    x: list[float] = Field(min_length=1, description="Feature vector")
    y: float = Field(description="Scalar label")


class ClientDataset(BaseModel):
    """The local dataset owned by one client of one server.

    Features are stored as a ``(D, d)`` matrix and labels as a length-``D``
    vector; both are read-only copies of the inputs.

    Attributes:
        features: Feature matrix, one row per data point
        labels: Label vector
        server_id: 1-based index of the owning server
        client_id: 1-based index of the client within its server
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    server_id: int = Field(ge=1, description="1-based server index")
    client_id: int = Field(ge=1, description="1-based client index")

    @field_validator("features", mode="before")
    @classmethod
    def _coerce_features(cls, value: Any) -> np.ndarray:
        features = np.array(value, dtype=np.float64, order="C")
        if features.ndim != 2:
            raise ValueError(f"features must be a 2-D matrix, got shape {features.shape}")
        features.flags.writeable = False
        return features

    @field_validator("labels", mode="before")
    @classmethod
    def _coerce_labels(cls, value: Any) -> np.ndarray:
        labels = np.array(value, dtype=np.float64, order="C")
        if labels.ndim != 1:
            raise ValueError(f"labels must be a vector, got shape {labels.shape}")
        labels.flags.writeable = False
        return labels

    @model_validator(mode="after")
    def _check_consistency(self) -> "ClientDataset":
        if self.features.shape[0] < 1:
            raise ValueError("a client dataset needs at least one data point")
        if self.features.shape[1] < 1:
            raise ValueError("features need at least one dimension")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset entries must be finite")
        return self

    @classmethod
    def from_points(
        cls, points: Sequence[DataPoint], server_id: int, client_id: int
    ) -> "ClientDataset":
        """Build a dataset from individual data points.

        Args:
            points: Data points sharing one feature dimension
            server_id: 1-based server index
            client_id: 1-based client index

        Returns:
            The assembled dataset

        Raises:
            RejectedInputError: If there are no points or dimensions differ
        """
        if not points:
            raise RejectedInputError("a client dataset needs at least one data point")
        dims = {len(p.x) for p in points}
        if len(dims) != 1:
            raise RejectedInputError(f"data points have mixed dimensions {sorted(dims)}")
        return cls(
            features=[p.x for p in points],
            labels=[p.y for p in points],
            server_id=server_id,
            client_id=client_id,
        )

    @property
    def dim(self) -> int:
        """Feature dimension d."""
        return int(self.features.shape[1])

    @property
    def size(self) -> int:
        """Number of data points D."""
        return int(self.features.shape[0])

    @property
    def points(self) -> list[DataPoint]:
        """The dataset as a list of data points."""
        return [
            DataPoint(x=row.tolist(), y=float(label))
            for row, label in zip(self.features, self.labels)
        ]


class LossKind(str, Enum):
    """Supported quadratic losses."""

    LEAST_SQUARES = "least-squares"
    RIDGE = "ridge"


class LossModel:
    """Empirical risk of one client.

    ``f(w) = (1/D) Σ_k ½(w'x_k − y_k)²``, plus ``(reg_coeff/2)‖w‖²`` for
    ridge. The gradient is evaluated through the precomputed Gram matrix and
    moment vector, ``∇f(w) = H w − b``.

    Attributes:
        dataset: The client's data
        kind: Loss family
        reg_coeff: Ridge coefficient (zero for least squares)
    """

    def __init__(
        self,
        dataset: ClientDataset,
        kind: LossKind = LossKind.LEAST_SQUARES,
        reg_coeff: float = 0.0,
    ) -> None:
        """Initialize the loss model.

        Args:
            dataset: The client's data
            kind: Loss family
            reg_coeff: Ridge coefficient, must be zero for least squares

        Raises:
            RejectedInputError: If the coefficient is negative or set for least squares
        """
        kind = LossKind(kind)
        if reg_coeff < 0:
            raise RejectedInputError(f"ridge coefficient must be non-negative, got {reg_coeff}")
        if kind is LossKind.LEAST_SQUARES and reg_coeff != 0:
            raise RejectedInputError("least-squares loss takes no ridge coefficient")

        self.dataset = dataset
        self.kind = kind
        self.reg_coeff = float(reg_coeff)

        features = dataset.features
        size = dataset.size
        hessian = features.T @ features / size + self.reg_coeff * np.eye(dataset.dim)
        linear = features.T @ dataset.labels / size
        hessian.flags.writeable = False
        linear.flags.writeable = False
        self._hessian: NDArray[np.float64] = hessian
        self._linear: NDArray[np.float64] = linear
        self._shape = (dataset.dim,)

    @property
    def dim(self) -> int:
        """Model dimension d."""
        return self.dataset.dim

    @property
    def server_id(self) -> int:
        """1-based server index of the underlying dataset."""
        return self.dataset.server_id

    @property
    def client_id(self) -> int:
        """1-based client index of the underlying dataset."""
        return self.dataset.client_id

    @property
    def hessian(self) -> NDArray[np.float64]:
        """Constant Hessian (1/D) Σ x_k x_k' (+ reg_coeff·I), read-only."""
        return self._hessian

    @property
    def linear_term(self) -> NDArray[np.float64]:
        """Moment vector (1/D) Σ y_k x_k, read-only."""
        return self._linear

    def value(self, w: ModelParams) -> float:
        """Evaluate f^{ij}(w)."""
        if w.shape != self._shape:
            raise RejectedInputError(
                f"Dimension mismatch: expected {self._shape[0]} parameters, got {w.shape}"
            )
        residuals = self.dataset.features @ w - self.dataset.labels
        value = 0.5 * float(residuals @ residuals) / self.dataset.size
        if self.reg_coeff:
            value += 0.5 * self.reg_coeff * float(w @ w)
        return value

    def gradient(self, w: ModelParams) -> ModelParams:
        """Evaluate ∇f^{ij}(w)."""
        if w.shape != self._shape:
            raise RejectedInputError(
                f"Dimension mismatch: expected {self._shape[0]} parameters, got {w.shape}"
            )
        return self._hessian @ w - self._linear

    def minimizer(self) -> ModelParams:
        """Return the client's own minimizer.

        Raises:
            AssumptionViolationError: If the Hessian is singular
        """
        _check_nonsingular(self, np.linalg.eigvalsh(self._hessian))
        return np.linalg.solve(self._hessian, self._linear)

    def __repr__(self) -> str:
        return (
            f"LossModel(server={self.server_id}, client={self.client_id}, "
            f"kind={self.kind.value}, reg_coeff={self.reg_coeff}, D={self.dataset.size})"
        )


def loss_value(model: LossModel, w: Any) -> float:
    """Evaluate a client's empirical risk.

    Args:
        model: The client's loss model
        w: Model parameters of dimension d

    Returns:
        f^{ij}(w)

    Raises:
        RejectedInputError: If w does not have dimension d
    """
    return model.value(as_params(w, model.dim))


def loss_gradient(model: LossModel, w: Any) -> ModelParams:
    """Evaluate the gradient of a client's empirical risk.

    Args:
        model: The client's loss model
        w: Model parameters of dimension d

    Returns:
        ∇f^{ij}(w)

    Raises:
        RejectedInputError: If w does not have dimension d
    """
    return model.gradient(as_params(w, model.dim))


class SmoothnessConstants(BaseModel):
    """Curvature and gradient-bound constants of a federation.

    Attributes:
        mu: Strong-convexity modulus, the smallest Hessian eigenvalue over clients
        L: Smoothness modulus, the largest Hessian eigenvalue over clients
        theta: Gradient-norm bound certified on the ball of ``region_radius``
            around ``center``
        region_radius: Radius R of the certification ball
        center: Centre of the certification ball
    """

    model_config = ConfigDict(frozen=True)

    mu: float = Field(gt=0, description="Strong-convexity modulus")
    L: float = Field(gt=0, description="Smoothness modulus")
    theta: float = Field(gt=0, description="Gradient-norm bound on the region")
    region_radius: float = Field(gt=0, description="Radius of the certification ball")
    center: list[float] = Field(min_length=1, description="Centre of the ball")

    @model_validator(mode="after")
    def _check_order(self) -> "SmoothnessConstants":
        if self.mu > self.L:
            raise ValueError(f"mu ({self.mu}) must not exceed L ({self.L})")
        return self

    def contains(self, w: ModelParams, slack: float = 0.0) -> bool:
        """Check whether a point lies inside the certification ball."""
        offset = w - np.asarray(self.center)
        return bool(np.sqrt(offset @ offset) <= self.region_radius + slack)


def _check_nonsingular(model: LossModel, eigenvalues: NDArray[np.float64]) -> None:
    lowest, highest = float(eigenvalues[0]), float(eigenvalues[-1])
    if lowest <= SINGULAR_TOLERANCE * max(highest, 1.0):
        raise AssumptionViolationError(
            f"Client {model.client_id} of server {model.server_id} has a singular "
            f"Hessian (smallest eigenvalue {lowest:.3e}); its risk is not strongly "
            "convex. Add data points or use a ridge loss."
        )


def estimate_constants(
    models: Sequence[LossModel], w0: Any, region_radius: float
) -> SmoothnessConstants:
    """Compute μ, L and θ for a set of client losses.

    μ and L are the extreme Hessian eigenvalues over all clients. θ bounds
    ‖∇f^{ij}(w)‖ on the ball ‖w − w0‖ ≤ R through the closed form
    ‖H^{ij}‖·R + ‖∇f^{ij}(w0)‖.

    Args:
        models: Loss models of every client
        w0: Centre of the certification ball
        region_radius: Radius R of the ball

    Returns:
        The estimated constants

    Raises:
        RejectedInputError: If there are no models, dimensions differ or R ≤ 0
        AssumptionViolationError: If a client Hessian is singular
    """
    if not models:
        raise RejectedInputError("at least one loss model is required")
    if region_radius <= 0:
        raise RejectedInputError(f"region radius must be positive, got {region_radius}")
    dim = models[0].dim
    if any(model.dim != dim for model in models):
        raise RejectedInputError("all client datasets must share one dimension")
    center = as_params(w0, dim)

    mu = np.inf
    smoothness = 0.0
    theta = 0.0
    for model in models:
        eigenvalues = np.linalg.eigvalsh(model.hessian)
        _check_nonsingular(model, eigenvalues)
        mu = min(mu, float(eigenvalues[0]))
        smoothness = max(smoothness, float(eigenvalues[-1]))
        gradient = model.gradient(center)
        client_theta = float(eigenvalues[-1]) * region_radius + float(
            np.sqrt(gradient @ gradient)
        )
        theta = max(theta, client_theta)

    logger.info(
        f"Estimated constants over {len(models)} clients: "
        f"mu={mu:.6g}, L={smoothness:.6g}, theta={theta:.6g}, R={region_radius:.6g}"
    )
    return SmoothnessConstants(
        mu=mu,
        L=smoothness,
        theta=theta,
        region_radius=region_radius,
        center=center.tolist(),
    )


def federation_weights(models: Sequence[LossModel]) -> list[float]:
    """Per-client weights of the global objective f = (1/M) Σ_i (1/N_i) Σ_j f^{ij}.

    Args:
        models: Loss models of every client

    Returns:
        One weight per model, in the order given
    """
    clients_per_server = Counter(model.server_id for model in models)
    num_servers = len(clients_per_server)
    return [1.0 / (num_servers * clients_per_server[m.server_id]) for m in models]


def federated_objective(models: Sequence[LossModel], w: Any) -> float:
    """Evaluate the global objective f(w) of the federation."""
    if not models:
        raise RejectedInputError("at least one loss model is required")
    params = as_params(w, models[0].dim)
    weights = federation_weights(models)
    return sum(weight * model.value(params) for weight, model in zip(weights, models))


def federated_gradient(models: Sequence[LossModel], w: Any) -> ModelParams:
    """Evaluate the gradient ∇f(w) of the global objective."""
    if not models:
        raise RejectedInputError("at least one loss model is required")
    params = as_params(w, models[0].dim)
    total = np.zeros(models[0].dim)
    for weight, model in zip(federation_weights(models), models):
        total = total + weight * model.gradient(params)
    return total
