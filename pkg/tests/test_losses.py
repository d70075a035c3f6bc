"""Tests for the losses module."""

import numpy as np
import pytest
from pydantic import ValidationError

from dfl_toolkit.errors import AssumptionViolationError, RejectedInputError
from dfl_toolkit.losses import (
    ClientDataset,
    DataPoint,
    LossKind,
    LossModel,
    SmoothnessConstants,
    as_params,
    estimate_constants,
    federated_gradient,
    federated_objective,
    federation_weights,
    loss_gradient,
    loss_value,
)


def make_dataset(
    features: list[list[float]], labels: list[float], server_id: int = 1, client_id: int = 1
) -> ClientDataset:
    return ClientDataset(
        features=features, labels=labels, server_id=server_id, client_id=client_id
    )


@pytest.fixture
def unit_dataset() -> ClientDataset:
    """Two points on the coordinate axes."""
    return make_dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 2.0])


@pytest.fixture
def random_models() -> list[LossModel]:
    """Four random least-squares clients in three dimensions."""
    rng = np.random.default_rng(21)
    return [
        LossModel(
            make_dataset(rng.normal(size=(25, 3)).tolist(), rng.normal(size=25).tolist(), 1, j)
        )
        for j in range(1, 5)
    ]


class TestClientDataset:
    """Test cases for ClientDataset."""

    def test_shapes(self, unit_dataset: ClientDataset) -> None:
        """Test dimension and size."""
        assert unit_dataset.dim == 2
        assert unit_dataset.size == 2

    def test_arrays_are_read_only(self, unit_dataset: ClientDataset) -> None:
        """Test that stored arrays cannot be modified."""
        with pytest.raises(ValueError):
            unit_dataset.features[0, 0] = 5.0

    def test_inputs_are_copied(self) -> None:
        """Test that mutating the source array leaves the dataset intact."""
        source = np.array([[1.0, 2.0]])
        dataset = make_dataset(source, [3.0])  # type: ignore[arg-type]
        source[0, 0] = 100.0
        assert dataset.features[0, 0] == 1.0

    def test_label_count_mismatch(self) -> None:
        """Test rejection of mismatched features and labels."""
        with pytest.raises(ValidationError):
            make_dataset([[1.0, 0.0], [0.0, 1.0]], [1.0])

    def test_non_finite_entries(self) -> None:
        """Test rejection of NaN and infinite entries."""
        with pytest.raises(ValidationError):
            make_dataset([[float("nan"), 0.0]], [1.0])
        with pytest.raises(ValidationError):
            make_dataset([[1.0, 0.0]], [float("inf")])

    def test_feature_matrix_must_be_2d(self) -> None:
        """Test rejection of a flat feature vector."""
        with pytest.raises(ValidationError):
            ClientDataset(features=[1.0, 2.0], labels=[1.0, 2.0], server_id=1, client_id=1)

    def test_indices_are_one_based(self) -> None:
        """Test rejection of zero indices."""
        with pytest.raises(ValidationError):
            make_dataset([[1.0]], [1.0], server_id=0)

    def test_from_points(self) -> None:
        """Test building a dataset from data points and reading them back."""
        points = [DataPoint(x=[1.0, 2.0], y=3.0), DataPoint(x=[4.0, 5.0], y=6.0)]
        dataset = ClientDataset.from_points(points, server_id=2, client_id=3)

        assert dataset.server_id == 2
        assert dataset.client_id == 3
        assert dataset.points == points

    def test_from_points_rejects_mixed_dimensions(self) -> None:
        """Test that points of different dimensions are rejected."""
        points = [DataPoint(x=[1.0], y=1.0), DataPoint(x=[1.0, 2.0], y=1.0)]
        with pytest.raises(RejectedInputError):
            ClientDataset.from_points(points, server_id=1, client_id=1)

    def test_from_points_rejects_empty(self) -> None:
        """Test that an empty point list is rejected."""
        with pytest.raises(RejectedInputError):
            ClientDataset.from_points([], server_id=1, client_id=1)


class TestLossModel:
    """Test cases for LossModel."""

    def test_value_and_gradient(self, unit_dataset: ClientDataset) -> None:
        """Test the least-squares value and gradient at the origin."""
        model = LossModel(unit_dataset)
        w = np.zeros(2)

        assert model.value(w) == pytest.approx(1.25)
        np.testing.assert_allclose(model.gradient(w), [-0.5, -1.0])

    def test_hessian_and_minimizer(self, unit_dataset: ClientDataset) -> None:
        """Test the Gram matrix and the exact minimizer."""
        model = LossModel(unit_dataset)

        np.testing.assert_allclose(model.hessian, 0.5 * np.eye(2))
        np.testing.assert_allclose(model.minimizer(), [1.0, 2.0])
        np.testing.assert_allclose(model.gradient(model.minimizer()), [0.0, 0.0], atol=1e-15)

    def test_ridge(self, unit_dataset: ClientDataset) -> None:
        """Test that ridge adds the coefficient to the Hessian and the value."""
        model = LossModel(unit_dataset, LossKind.RIDGE, reg_coeff=0.5)
        w = np.array([1.0, 1.0])

        np.testing.assert_allclose(model.hessian, np.eye(2))
        assert model.value(w) == pytest.approx(0.25 + 0.5)

    def test_least_squares_rejects_coefficient(self, unit_dataset: ClientDataset) -> None:
        """Test that least squares takes no ridge coefficient."""
        with pytest.raises(RejectedInputError):
            LossModel(unit_dataset, LossKind.LEAST_SQUARES, reg_coeff=0.1)

    def test_negative_coefficient(self, unit_dataset: ClientDataset) -> None:
        """Test rejection of a negative ridge coefficient."""
        with pytest.raises(RejectedInputError):
            LossModel(unit_dataset, LossKind.RIDGE, reg_coeff=-1.0)

    def test_kind_from_string(self, unit_dataset: ClientDataset) -> None:
        """Test that the loss kind accepts its string value."""
        model = LossModel(unit_dataset, "ridge", reg_coeff=1.0)  # type: ignore[arg-type]
        assert model.kind is LossKind.RIDGE

    def test_dimension_mismatch(self, unit_dataset: ClientDataset) -> None:
        """Test that evaluating with the wrong dimension fails."""
        model = LossModel(unit_dataset)
        with pytest.raises(RejectedInputError):
            loss_gradient(model, [1.0, 2.0, 3.0])
        with pytest.raises(RejectedInputError):
            loss_value(model, [1.0])

    def test_as_params_rejects_matrices(self) -> None:
        """Test that parameters must be a vector."""
        with pytest.raises(RejectedInputError):
            as_params([[1.0, 2.0]])

    def test_gradient_matches_finite_differences(self) -> None:
        """Test analytic gradients against central differences on random instances."""
        rng = np.random.default_rng(2024)
        step = 1e-5
        for _ in range(100):
            dim = int(rng.integers(1, 6))
            size = int(rng.integers(dim, 3 * dim + 3))
            dataset = make_dataset(
                rng.normal(size=(size, dim)).tolist(), rng.normal(size=size).tolist()
            )
            ridge = bool(rng.integers(0, 2))
            model = LossModel(
                dataset,
                LossKind.RIDGE if ridge else LossKind.LEAST_SQUARES,
                float(rng.uniform(0.0, 1.0)) if ridge else 0.0,
            )
            w = rng.normal(scale=3.0, size=dim)

            numeric = np.array(
                [
                    (loss_value(model, w + step * e) - loss_value(model, w - step * e))
                    / (2 * step)
                    for e in np.eye(dim)
                ]
            )
            analytic = loss_gradient(model, w)
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1.0)
            assert error < 1e-5


class TestSmoothnessConstants:
    """Test cases for constant estimation."""

    def test_isotropic_data(self, unit_dataset: ClientDataset) -> None:
        """Test μ, L and θ for an isotropic Hessian."""
        model = LossModel(unit_dataset)
        constants = estimate_constants([model], [0.0, 0.0], region_radius=2.0)

        assert constants.mu == pytest.approx(0.5)
        assert constants.L == pytest.approx(0.5)
        # λmax·R + ‖∇f(0)‖ = 0.5·2 + ‖(-0.5, -1)‖
        assert constants.theta == pytest.approx(1.0 + np.sqrt(1.25))
        assert constants.center == [0.0, 0.0]

    def test_theta_bounds_gradients_in_region(self) -> None:
        """Test that sampled gradients inside the ball stay below θ."""
        rng = np.random.default_rng(7)
        models = [
            LossModel(
                make_dataset(
                    rng.normal(size=(10, 3)).tolist(), rng.normal(size=10).tolist(), 1, j
                )
            )
            for j in range(1, 4)
        ]
        center = np.array([1.0, -1.0, 0.5])
        constants = estimate_constants(models, center, region_radius=3.0)
        for _ in range(200):
            direction = rng.normal(size=3)
            w = center + 3.0 * rng.uniform() * direction / np.linalg.norm(direction)
            for model in models:
                assert np.linalg.norm(model.gradient(w)) <= constants.theta + 1e-12
            assert constants.contains(w, slack=1e-12)

    def test_singular_client_is_named(self) -> None:
        """Test that a rank-deficient client is reported by index."""
        singular = LossModel(make_dataset([[1.0, 2.0]], [1.0], server_id=3, client_id=2))
        with pytest.raises(AssumptionViolationError, match="Client 2 of server 3"):
            estimate_constants([singular], [0.0, 0.0], region_radius=1.0)

    def test_radius_must_be_positive(self, unit_dataset: ClientDataset) -> None:
        """Test rejection of a non-positive radius."""
        with pytest.raises(RejectedInputError):
            estimate_constants([LossModel(unit_dataset)], [0.0, 0.0], region_radius=0.0)

    def test_mu_above_l_rejected(self) -> None:
        """Test the ordering validator."""
        with pytest.raises(ValidationError):
            SmoothnessConstants(mu=2.0, L=1.0, theta=1.0, region_radius=1.0, center=[0.0])

    def test_strong_convexity_witness(self, random_models: list[LossModel]) -> None:
        """Test f(w) ≥ f(v) + ∇f(v)'(w − v) + (μ/2)‖w − v‖² on random pairs."""
        rng = np.random.default_rng(5)
        constants = estimate_constants(random_models, np.zeros(3), region_radius=1.0)
        for _ in range(100):
            w, v = rng.normal(scale=3.0, size=(2, 3))
            for model in random_models:
                lower = (
                    model.value(v)
                    + float(model.gradient(v) @ (w - v))
                    + 0.5 * constants.mu * float((w - v) @ (w - v))
                )
                assert model.value(w) >= lower - 1e-9 * (1.0 + abs(model.value(w)))

    def test_smoothness_witness(self, random_models: list[LossModel]) -> None:
        """Test ‖∇f(w) − ∇f(v)‖ ≤ L‖w − v‖ on random pairs."""
        rng = np.random.default_rng(6)
        constants = estimate_constants(random_models, np.zeros(3), region_radius=1.0)
        for _ in range(100):
            w, v = rng.normal(scale=3.0, size=(2, 3))
            for model in random_models:
                change = np.linalg.norm(model.gradient(w) - model.gradient(v))
                assert change <= constants.L * np.linalg.norm(w - v) * (1 + 1e-12) + 1e-12

    def test_smoothness_matches_power_iteration(self, random_models: list[LossModel]) -> None:
        """Test L against the largest eigenvalue found by power iteration."""
        constants = estimate_constants(random_models, np.zeros(3), region_radius=1.0)
        largest = 0.0
        for model in random_models:
            v = np.ones(3) / np.sqrt(3.0)
            for _ in range(1000):
                hv = model.hessian @ v
                v = hv / np.linalg.norm(hv)
            largest = max(largest, float(v @ model.hessian @ v))

        assert constants.L == pytest.approx(largest, abs=1e-8)

    def test_ridge_shifts_spectrum(self) -> None:
        """Test that a Gram matrix diag(1, 2) with ridge 3 gives μ = 4 and L = 5."""
        dataset = make_dataset([[np.sqrt(2.0), 0.0], [0.0, 2.0]], [1.0, 1.0])
        model = LossModel(dataset, LossKind.RIDGE, 3.0)
        constants = estimate_constants([model], [0.0, 0.0], region_radius=1.0)

        assert constants.mu == pytest.approx(4.0)
        assert constants.L == pytest.approx(5.0)


class TestFederatedObjective:
    """Test cases for the federation-wide objective."""

    def test_weights_follow_server_sizes(self) -> None:
        """Test (1/M)(1/N_i) weights with unequal client counts."""
        models = [
            LossModel(make_dataset([[1.0]], [1.0], 1, 1)),
            LossModel(make_dataset([[1.0]], [2.0], 1, 2)),
            LossModel(make_dataset([[1.0]], [3.0], 2, 1)),
        ]
        assert federation_weights(models) == pytest.approx([0.25, 0.25, 0.5])

    def test_objective_and_gradient(self) -> None:
        """Test the weighted objective against a hand computation."""
        models = [
            LossModel(make_dataset([[1.0]], [1.0], 1, 1)),
            LossModel(make_dataset([[1.0]], [3.0], 2, 1)),
        ]
        # f(w) = ½·½(w − 1)² + ½·½(w − 3)², minimized at w = 2
        assert federated_objective(models, [2.0]) == pytest.approx(0.5)
        np.testing.assert_allclose(federated_gradient(models, [2.0]), [0.0])
        np.testing.assert_allclose(federated_gradient(models, [0.0]), [-2.0])

    def test_empty_federation(self) -> None:
        """Test rejection of an empty model list."""
        with pytest.raises(RejectedInputError):
            federated_objective([], [0.0])
