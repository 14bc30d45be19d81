"""Blind separation of intermittent sources: dictionary learning with
smoothness-aware sparse recovery, per-source HMM filtering, and scoring."""

__version__ = "0.1.0"

from .scenario import HmmParams, Scenario, ScenarioConfig, SignalDistribution, generate  # noqa: E402
from .sparse_solvers import SolverParams, SparseSolution  # noqa: E402
from .dictionary_learning import ChannelUpdate, DlConfig, DlResult, SignalSolver, run_dl  # noqa: E402
from .psf import BacParams, EmConfig, psf_pipeline  # noqa: E402

__all__ = [
    "BacParams", "ChannelUpdate", "DlConfig", "DlResult", "EmConfig", "HmmParams", "Scenario",
    "ScenarioConfig", "SignalDistribution", "SignalSolver", "SolverParams", "SparseSolution",
    "generate", "psf_pipeline", "run_dl",
]
