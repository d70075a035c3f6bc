"""Tests for the experiment module."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import toml

from dfl_toolkit.config import ExperimentConfig
from dfl_toolkit.errors import ConfigurationError, RejectedInputError
from dfl_toolkit.experiment import (
    AUTO_STEP_FRACTION,
    SUMMARY_COLUMNS,
    Experiment,
    run_sweep,
)
from dfl_toolkit.metrics import METRICS_COLUMNS, consensus_reached_at
from dfl_toolkit.theory import max_step_size


@pytest.fixture
def config(tmp_path: Path) -> ExperimentConfig:
    """A small federation that runs in well under a second."""
    return ExperimentConfig.model_validate(
        {
            "schedule": {"t_c": 5, "t_s": 2},
            "data": {"num_servers": 3, "clients_per_server": 2, "points_per_client": 30},
            "run": {"num_epochs": 20, "output_dir": str(tmp_path / "runs")},
        }
    )


class TestExperiment:
    """Test cases for Experiment class."""

    def test_gen_data(self, config: ExperimentConfig) -> None:
        """Test the dataset file and its summary."""
        report = Experiment(config).gen_data()

        assert report.num_points == 180
        assert len(pd.read_csv(report.dataset_path)) == 180
        summary = toml.load(report.summary_path)
        assert summary["num_servers"] == 3
        assert summary["num_clients"] == 6
        assert summary["dim"] == 2
        assert summary["mu"] <= summary["L"]
        assert summary["w_star"] == pytest.approx([5.0, 2.0], abs=0.1)

    def test_bounds_without_simulating(self, config: ExperimentConfig) -> None:
        """Test the bound constants and that no metrics are written."""
        experiment = Experiment(config)
        bounds = experiment.bounds()

        assert set(bounds) == {
            "sigma_a",
            "lam",
            "capital_lambda",
            "y0",
            "epsilon",
            "delta0",
            "max_step_size",
            "gamma",
            "mu",
            "L",
            "theta",
        }
        assert bounds["gamma"] == pytest.approx(AUTO_STEP_FRACTION * bounds["max_step_size"])
        assert bounds["max_step_size"] == max_step_size(experiment.constants, 5)
        assert 0.0 < bounds["sigma_a"] < 1.0
        assert not list(config.run.output_dir.rglob("metrics.csv"))

    def test_simulate_artifacts(self, config: ExperimentConfig) -> None:
        """Test the files of a simulation and the certification outcome."""
        outcome = Experiment(config).simulate()

        assert set(outcome.paths) == {"metrics", "models", "config"}
        frame = pd.read_csv(outcome.paths["metrics"])
        assert list(frame.columns) == METRICS_COLUMNS
        assert len(frame) == 21
        assert len(pd.read_csv(outcome.paths["models"])) == 3
        written = ExperimentConfig.model_validate(toml.load(outcome.paths["config"]))
        assert written == config

        assert outcome.certified
        assert outcome.exit_code == 0
        outcome.raise_for_violations()

    def test_bounds_dominate_metrics(self, config: ExperimentConfig) -> None:
        """Test that every epoch lies below its bound columns."""
        outcome = Experiment(config).simulate()
        for m in outcome.metrics:
            assert m.lemma1_bound is not None and m.lemma4_bound is not None
            assert m.consensus_error <= m.lemma1_bound + 1e-9
            assert m.avg_gap <= m.lemma4_bound + 1e-9
            assert m.optimality_gap <= m.lemma1_bound + m.lemma4_bound + 1e-9

    def test_iterate_log(self, config: ExperimentConfig) -> None:
        """Test that the iterate log is written when requested."""
        outcome = Experiment(config.with_overrides(**{"flags.record_iterates": True})).simulate()
        frame = pd.read_csv(outcome.paths["iterates"])
        # 20 epochs, T_S + 1 logged steps, 3 servers
        assert len(frame) == 20 * 3 * 3

    def test_gnuplot_metrics(self, config: ExperimentConfig) -> None:
        """Test the alternative metrics layout."""
        outcome = Experiment(config).simulate(fmt="gnuplot")
        first = outcome.paths["metrics"].read_text(encoding="utf-8").splitlines()[0]
        assert first.startswith("# epoch ")

    def test_step_above_gate(self, config: ExperimentConfig) -> None:
        """Test that a step size above the gate is a configuration error."""
        experiment = Experiment(config.with_overrides(step_size=10.0))
        with pytest.raises(ConfigurationError, match="violates") as excinfo:
            experiment.simulate()
        assert excinfo.value.exit_code == 2

    def test_overridden_gate_is_uncertified(self, config: ExperimentConfig) -> None:
        """Test that an overridden gate runs without bounds and succeeds."""
        gate = Experiment(config).bounds()["max_step_size"]
        experiment = Experiment(
            config.with_overrides(
                **{"step_size": 1.2 * gate, "flags.override_step_gate": True}
            )
        )
        outcome = experiment.simulate()

        assert outcome.bounds is None
        assert outcome.report is None
        assert not outcome.certified
        assert outcome.exit_code == 0
        assert pd.read_csv(outcome.paths["metrics"])["epsilon"].isna().all()
        with pytest.raises(ConfigurationError):
            experiment.bounds()

    def test_workers_do_not_change_results(self, config: ExperimentConfig) -> None:
        """Test byte-identical metrics for serial and threaded client phases."""
        serial = Experiment(config).simulate()
        threaded = Experiment(config.with_overrides(**{"run.workers": 3})).simulate()
        assert serial.run_dir != threaded.run_dir
        assert serial.paths["metrics"].read_bytes() == threaded.paths["metrics"].read_bytes()

    def test_seeded_initial_models(self, config: ExperimentConfig) -> None:
        """Test that the run seed fixes the initial models."""
        first = Experiment(config).initial_models
        np.testing.assert_array_equal(first, Experiment(config).initial_models)
        other = Experiment(config.with_overrides(**{"run.seed": 1})).initial_models
        assert not np.array_equal(first, other)

    def test_default_region(self, config: ExperimentConfig) -> None:
        """Test the derived certification radius and centre."""
        experiment = Experiment(config)
        offsets = np.linalg.norm(experiment.initial_models - experiment.w_star, axis=1)
        assert experiment.region_radius == pytest.approx(4.0 * offsets.max())
        np.testing.assert_allclose(
            experiment.constants.center, experiment.initial_models.mean(axis=0)
        )

    def test_explicit_region(self, config: ExperimentConfig) -> None:
        """Test that a configured radius is used as given."""
        experiment = Experiment(config.with_overrides(**{"run.region_radius": 50.0}))
        assert experiment.constants.region_radius == 50.0

    def test_run_dir_reuse_warns(
        self, config: ExperimentConfig, caplog: pytest.LogCaptureFixture
    ) -> None:
        """Test that rerunning a configuration warns before replacing artifacts."""
        first = Experiment(config).run_dir
        with caplog.at_level(logging.WARNING, logger="dfl_toolkit.experiment"):
            second = Experiment(config).run_dir
        assert first == second
        assert "already exists" in caplog.text

    def test_run_dir_name(self, config: ExperimentConfig) -> None:
        """Test that the run directory carries the hash and the seed."""
        experiment = Experiment(config)
        assert experiment.run_dir.name == f"{config.config_hash()[:12]}-seed0"

    def test_load_dataset_file(self, config: ExperimentConfig) -> None:
        """Test that a written dataset reproduces the generated federation."""
        generated = Experiment(config)
        report = generated.gen_data()
        loaded = Experiment(config.with_overrides(**{"data.path": report.dataset_path}))

        assert loaded.num_servers == 3
        np.testing.assert_array_equal(loaded.w_star, generated.w_star)

    def test_ridge_loss(self, config: ExperimentConfig) -> None:
        """Test that a ridge configuration runs and is certified."""
        experiment = Experiment(
            config.with_overrides(**{"loss.kind": "ridge", "loss.reg_coeff": 0.5})
        )
        outcome = experiment.simulate()
        assert outcome.certified
        assert outcome.exit_code == 0

    def test_default_config_uses_environment(
        self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path
    ) -> None:
        """Test that an experiment without a configuration reads the environment."""
        monkeypatch.setenv("DFL_OUTPUT_DIR", str(tmp_path / "env"))
        assert Experiment().config.run.output_dir == tmp_path / "env"

    @pytest.mark.slow
    def test_full_scale_reproduction(self, tmp_path: Path) -> None:
        """Test the default 5 x 5 x 100 federation on a cycle of servers."""
        config = ExperimentConfig().with_overrides(**{"run.output_dir": tmp_path})
        outcome = Experiment(config).simulate()

        assert outcome.certified
        assert outcome.exit_code == 0
        reached = consensus_reached_at(outcome.metrics, 1e-3)
        assert reached is not None and reached <= 175
        assert outcome.bounds is not None
        assert outcome.metrics[-1].optimality_gap <= outcome.bounds.epsilon


class TestSweep:
    """Test cases for parameter sweeps."""

    def test_sweep_over_client_iterations(self, config: ExperimentConfig) -> None:
        """Test the combined metrics and the summary of a sweep."""
        outcome = run_sweep(config, "t_c", ["2", "5"])

        sweep = pd.read_csv(outcome.sweep_path)
        assert list(sweep.columns) == ["value", *METRICS_COLUMNS]
        assert len(sweep) == 2 * 21
        assert sorted(sweep["value"].unique().tolist()) == [2, 5]

        summary = pd.read_csv(outcome.summary_path)
        assert list(summary.columns) == SUMMARY_COLUMNS
        assert summary["status"].tolist() == ["ok", "ok"]
        assert outcome.exit_code == 0

    def test_failing_point_is_recorded(self, config: ExperimentConfig) -> None:
        """Test that a failing point is reported and the sweep continues."""
        outcome = run_sweep(config, "gamma", ["auto", "10"])

        assert outcome.summary["status"].tolist() == ["ok", "failed"]
        assert outcome.summary["exit_code"].tolist() == [0, 2]
        assert "violates" in outcome.summary["message"].iloc[1]
        assert outcome.exit_code == 2
        assert len(pd.read_csv(outcome.sweep_path)) == 21

    def test_sweep_topologies(self, config: ExperimentConfig) -> None:
        """Test sweeping over graph generators."""
        five_servers = config.with_overrides(**{"data.num_servers": 5})
        outcome = run_sweep(five_servers, "topology", ["cycle", "complete", "star", "path"])
        sigma = outcome.summary.set_index("value")["sigma_a"]
        assert sigma["complete"] == pytest.approx(0.0, abs=1e-12)
        assert sigma["cycle"] > sigma["complete"]
        assert sigma["path"] > sigma["cycle"]

    def test_processes_match_serial(self, config: ExperimentConfig) -> None:
        """Test that a process pool gives the same summary as a serial sweep."""
        serial = run_sweep(config, "t_s", [1, 3])
        parallel = run_sweep(config, "t_s", [1, 3], workers=2)
        pd.testing.assert_frame_equal(serial.summary, parallel.summary)

    def test_unknown_parameter(self, config: ExperimentConfig) -> None:
        """Test rejection of a parameter that cannot be swept."""
        with pytest.raises(RejectedInputError, match="known"):
            run_sweep(config, "noise_std", [0.1])

    def test_empty_values(self, config: ExperimentConfig) -> None:
        """Test rejection of an empty value list."""
        with pytest.raises(RejectedInputError):
            run_sweep(config, "t_c", [])

    def test_unparsable_value(self, config: ExperimentConfig) -> None:
        """Test rejection of a value of the wrong type."""
        with pytest.raises(RejectedInputError, match="t_c"):
            run_sweep(config, "t_c", ["many"])
