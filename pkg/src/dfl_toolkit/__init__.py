"""DFL toolkit: distributed federated learning simulation and bound checking.

This package simulates servers that alternate federated averaging over their
own clients with consensus iterations over a server graph, and checks the
simulated trajectories against closed-form convergence bounds.
"""

__version__ = "0.1.0"

from dfl_toolkit.config import ExperimentConfig
from dfl_toolkit.experiment import Experiment, run_sweep

__all__ = ["Experiment", "ExperimentConfig", "run_sweep"]
